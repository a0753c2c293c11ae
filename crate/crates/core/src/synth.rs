//! Synthetic scenes: dense nodule instances with masks, a handful of point
//! labels, and a six-region station partition per scene group.
//!
//! A "group" plays the role of one video: scenes of a group share background
//! statistics and station layout, and a whole group always lands in one split.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{BinaryMask, StationMap, STATIONS};
use crate::heatmap::{Keypoint, KeypointSet};
use crate::model::Planes;
use crate::rle::{LabelRle, MaskRle};

const PLACEMENT_RETRIES: usize = 500;
const MAX_OVERLAP: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Mean number of dense instances per scene.
    pub instances_mean: f64,
    pub instances_range: (usize, usize),
    pub nodule_radius_range: (f64, f64),
    /// Number of point-annotated instances per scene.
    pub sparse_range: (usize, usize),
    /// Number of scene groups sharing background statistics and stations.
    pub texture_seed_groups: usize,
    pub stations: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            instances_mean: 12.0,
            instances_range: (6, 18),
            nodule_radius_range: (2.0, 3.5),
            sparse_range: (1, 3),
            texture_seed_groups: 30,
            stations: STATIONS,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.height < 8 || self.width < 8 {
            return err(format!("scene must be at least 8x8, got {}x{}", self.height, self.width));
        }
        let (lo, hi) = self.instances_range;
        if lo > hi || lo < 1 || hi > 64 {
            return err(format!("instances_range {lo}..{hi} must satisfy 1 <= min <= max <= 64"));
        }
        if !(self.instances_mean >= lo as f64 && self.instances_mean <= hi as f64) {
            return err(format!(
                "instances_mean {} lies outside instances_range {lo}..{hi}",
                self.instances_mean
            ));
        }
        let (rlo, rhi) = self.nodule_radius_range;
        if !(rlo > 0.0 && rlo <= rhi && rhi.is_finite()) {
            return err(format!("nodule_radius_range {rlo}..{rhi} is invalid"));
        }
        if 2.0 * (rhi * 1.3).ceil() + 3.0 > self.height.min(self.width) as f64 {
            return err(format!("nodules of radius {rhi} do not fit a {}x{} scene", self.height, self.width));
        }
        let (slo, shi) = self.sparse_range;
        if slo > shi {
            return err(format!("sparse_range {slo}..{shi} has min > max"));
        }
        if self.texture_seed_groups == 0 {
            return err("texture_seed_groups must be >= 1".into());
        }
        if self.stations != STATIONS {
            return err(format!("stations is fixed at {STATIONS}, got {}", self.stations));
        }
        Ok(())
    }
}

/// One dense nodule: its center pixel and its pixel mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub center: Keypoint,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// RGB in `[0, 1]`, quantized to 8-bit levels so the PNG file is lossless.
    pub image: Planes<f64>,
    pub instances: Vec<Instance>,
    pub sparse_labels: KeypointSet,
    pub station_map: StationMap,
    pub station_presence: [bool; STATIONS],
    pub group_id: usize,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn centers(&self) -> Vec<Keypoint> {
        self.instances.iter().map(|i| i.center).collect()
    }

    pub fn masks(&self) -> Vec<BinaryMask> {
        self.instances.iter().map(|i| i.mask.clone()).collect()
    }
}

/// SplitMix64 finalizer; derives independent seeds from structured keys.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const GROUP_STREAM: u64 = 0x6772_6f75_70;
const SPARSE_STREAM: u64 = 0x7370_6172_7365;

struct GroupStyle {
    base: [f64; 3],
    amplitude: f64,
    cell: f64,
    station_tint: [[f64; 3]; STATIONS],
    station_seeds: [(usize, usize); STATIONS],
}

impl GroupStyle {
    fn new(spec: &SceneSpec, group_id: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(GROUP_STREAM, group_id as u64));
        let base = [
            rng.random_range(0.45..0.6),
            rng.random_range(0.22..0.35),
            rng.random_range(0.22..0.35),
        ];
        let amplitude = rng.random_range(0.08..0.16);
        let cell = rng.random_range(12.0..24.0);
        let mut station_tint = [[0.0; 3]; STATIONS];
        for tint in &mut station_tint {
            for v in tint.iter_mut() {
                *v = rng.random_range(-0.04..0.04);
            }
        }
        let picks = sample_indices(&mut rng, spec.height * spec.width, STATIONS);
        let mut station_seeds = [(0, 0); STATIONS];
        for (slot, idx) in station_seeds.iter_mut().zip(picks.iter()) {
            *slot = (idx / spec.width, idx % spec.width);
        }
        Self {
            base,
            amplitude,
            cell,
            station_tint,
            station_seeds,
        }
    }

    fn station_map(&self, height: usize, width: usize) -> StationMap {
        let mut labels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                let mut best = (usize::MAX, 0);
                for (s, &(sr, sc)) in self.station_seeds.iter().enumerate() {
                    let d = r.abs_diff(sr).pow(2) + c.abs_diff(sc).pow(2);
                    if d < best.0 {
                        best = (d, s);
                    }
                }
                labels.push(best.1 as u8 + 1);
            }
        }
        StationMap::new(height, width, labels).expect("Voronoi cells cover every station")
    }
}

/// Smooth value noise: random lattice values blended with a smoothstep.
fn value_noise(rng: &mut ChaCha8Rng, height: usize, width: usize, cell: f64) -> Vec<f64> {
    let gh = (height as f64 / cell).ceil() as usize + 2;
    let gw = (width as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random_range(-1.0..1.0)).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        let fr = r as f64 / cell;
        let (r0, tr) = (fr.floor() as usize, smooth(fr.fract()));
        for c in 0..width {
            let fc = c as f64 / cell;
            let (c0, tc) = (fc.floor() as usize, smooth(fc.fract()));
            let at = |i: usize, j: usize| lattice[i * gw + j];
            let top = at(r0, c0) * (1.0 - tc) + at(r0, c0 + 1) * tc;
            let bottom = at(r0 + 1, c0) * (1.0 - tc) + at(r0 + 1, c0 + 1) * tc;
            out.push(top * (1.0 - tr) + bottom * tr);
        }
    }
    out
}

struct Nodule {
    center: (usize, usize),
    radius: f64,
    harmonics: [(f64, f64); 2],
}

impl Nodule {
    fn boundary(&self, theta: f64) -> f64 {
        let [(a2, p2), (a3, p3)] = self.harmonics;
        self.radius * (1.0 + a2 * (2.0 * theta + p2).cos() + a3 * (3.0 * theta + p3).cos())
    }

    /// Normalized radial position of a pixel, `<= 1` inside the nodule.
    fn radial(&self, r: usize, c: usize) -> f64 {
        let dr = r as f64 - self.center.0 as f64;
        let dc = c as f64 - self.center.1 as f64;
        let d = (dr * dr + dc * dc).sqrt();
        if d == 0.0 {
            return 0.0;
        }
        d / self.boundary(dr.atan2(dc))
    }

    fn rasterize(&self, height: usize, width: usize) -> BinaryMask {
        let reach = (self.radius * 1.3).ceil() as usize + 1;
        let mut mask = BinaryMask::empty(height, width);
        let (cr, cc) = self.center;
        for r in cr.saturating_sub(reach)..=(cr + reach).min(height - 1) {
            for c in cc.saturating_sub(reach)..=(cc + reach).min(width - 1) {
                if self.radial(r, c) <= 1.0 {
                    mask.set(r, c, true);
                }
            }
        }
        mask.component_containing(cr, cc)
    }
}

fn draw_count(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> usize {
    let (lo, hi) = spec.instances_range;
    if lo == hi {
        return lo;
    }
    let poisson = Poisson::new(spec.instances_mean).expect("instances_mean > 0");
    for _ in 0..100 {
        let n = poisson.sample(rng) as usize;
        if (lo..=hi).contains(&n) {
            return n;
        }
    }
    (spec.instances_mean.round() as usize).clamp(lo, hi)
}

/// Renders one scene. `sparse_labels` is left empty; see [`sparsify_labels`].
pub fn generate_scene(spec: &SceneSpec, seed: u64, group_id: usize) -> Result<Sample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let style = GroupStyle::new(spec, group_id);
    let station_map = style.station_map(h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, group_id as u64));

    let count = draw_count(spec, &mut rng);
    let (rlo, rhi) = spec.nodule_radius_range;
    let margin = (rhi * 1.3).ceil() as usize + 1;
    let mut nodules: Vec<Nodule> = Vec::with_capacity(count);
    let mut masks: Vec<BinaryMask> = Vec::with_capacity(count);
    for k in 0..count {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let nodule = Nodule {
                center: (rng.random_range(margin..h - margin), rng.random_range(margin..w - margin)),
                radius: rng.random_range(rlo..=rhi),
                harmonics: [
                    (rng.random_range(0.0..0.15), rng.random_range(0.0..std::f64::consts::TAU)),
                    (rng.random_range(0.0..0.15), rng.random_range(0.0..std::f64::consts::TAU)),
                ],
            };
            let mask = nodule.rasterize(h, w);
            let area = mask.count() as f64;
            let conflict = nodules.iter().zip(&masks).any(|(other, other_mask)| {
                let shared = mask.overlap(other_mask) as f64;
                shared > MAX_OVERLAP * area
                    || shared > MAX_OVERLAP * other_mask.count() as f64
                    || mask.get(other.center.0, other.center.1)
                    || other_mask.get(nodule.center.0, nodule.center.1)
            });
            if !conflict {
                nodules.push(nodule);
                masks.push(mask);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place nodule {} of {count} in a {h}x{w} scene after {PLACEMENT_RETRIES} attempts",
                k + 1
            )));
        }
    }

    // background
    let mut image = Planes::zeros(3, h, w);
    for ch in 0..3 {
        let noise = value_noise(&mut rng, h, w, style.cell);
        for r in 0..h {
            for c in 0..w {
                let station = station_map.get(r, c) as usize - 1;
                let v = style.base[ch] + style.amplitude * noise[r * w + c] + style.station_tint[station][ch];
                image.set(ch, r, c, v);
            }
        }
    }

    // nodules: pale bumps blended over the background
    for nodule in &nodules {
        let color = [
            rng.random_range(0.85..0.95),
            rng.random_range(0.78..0.9),
            rng.random_range(0.55..0.7),
        ];
        let strength = rng.random_range(0.55..0.8);
        let reach = (nodule.radius * 1.3).ceil() as usize + 1;
        let (cr, cc) = nodule.center;
        for r in cr.saturating_sub(reach)..=(cr + reach).min(h - 1) {
            for c in cc.saturating_sub(reach)..=(cc + reach).min(w - 1) {
                let t = nodule.radial(r, c);
                if t <= 1.0 {
                    let alpha = strength * (1.0 - t * t).sqrt();
                    for (ch, &col) in color.iter().enumerate() {
                        let v = image.get(ch, r, c);
                        image.set(ch, r, c, v * (1.0 - alpha) + col * alpha);
                    }
                }
            }
        }
    }

    let pixel_noise = Normal::new(0.0, 0.02).expect("valid normal");
    for v in image.data.iter_mut() {
        *v = ((*v + pixel_noise.sample(&mut rng)).clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }

    let instances: Vec<Instance> = nodules
        .iter()
        .zip(masks)
        .map(|(n, mask)| Instance {
            center: Keypoint::new(n.center.0, n.center.1),
            mask,
        })
        .collect();
    let station_presence = station_presence(&station_map, instances.iter().map(|i| i.center));
    Ok(Sample {
        image,
        instances,
        sparse_labels: KeypointSet::empty(),
        station_map,
        station_presence,
        group_id,
    })
}

/// `presence[s]` is set iff some point lies in station `s + 1`.
pub fn station_presence(map: &StationMap, points: impl IntoIterator<Item = Keypoint>) -> [bool; STATIONS] {
    let mut presence = [false; STATIONS];
    for p in points {
        presence[map.get(p.row, p.col) as usize - 1] = true;
    }
    presence
}

/// Picks a few instance centers as the sparse point labels.
pub fn sparsify_labels(mut sample: Sample, spec: &SceneSpec, seed: u64) -> Result<Sample> {
    if sample.instances.is_empty() {
        return Err(Error::Input("cannot sparsify a scene without instances".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, SPARSE_STREAM));
    let (lo, hi) = spec.sparse_range;
    let want = rng.random_range(lo..=hi).min(sample.instances.len());
    let mut picked = sample_indices(&mut rng, sample.instances.len(), want).into_vec();
    picked.sort_unstable();
    sample.sparse_labels = KeypointSet::new(picked.into_iter().map(|i| sample.instances[i].center).collect())?;
    Ok(sample)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split '{s}', expected train, val or test")))
    }
}

/// Sample counts per split and the group ratio used to divide groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitPlan {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub group_ratio: [usize; 3],
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self {
            train: 240,
            val: 60,
            test: 60,
            group_ratio: [3, 1, 1],
        }
    }
}

impl SplitPlan {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn validate(&self, groups: usize) -> Result<()> {
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return Err(Error::Config("every split needs at least one sample".into()));
        }
        if self.group_ratio.contains(&0) {
            return Err(Error::Config("group_ratio entries must be positive".into()));
        }
        if groups < 3 {
            return Err(Error::Config(format!(
                "need at least 3 scene groups to split by group, got {groups}"
            )));
        }
        Ok(())
    }

    /// Number of groups per split: proportional to the ratio, at least one each.
    fn group_counts(&self, groups: usize) -> [usize; 3] {
        let total: usize = self.group_ratio.iter().sum();
        let share = |i: usize| ((groups * self.group_ratio[i]) as f64 / total as f64).round().max(1.0) as usize;
        let val = share(1).min(groups - 2);
        let test = share(2).min(groups - 1 - val);
        [groups - val - test, val, test]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub annotation: PathBuf,
    pub split: Split,
    pub group_id: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub spec: SceneSpec,
    pub plan: SplitPlan,
    pub master_seed: u64,
    pub samples: Vec<ManifestEntry>,
    /// Directory the relative sample paths resolve against; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format { path: file.clone(), message: e.to_string() })?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::Format {
                path: file,
                message: format!("unsupported manifest version {}", manifest.format_version),
            });
        }
        manifest.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(manifest)
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.samples.iter().filter(move |e| e.split == split)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.entries(split)
            .map(|e| load_sample(&self.root.join(&e.image), &self.root.join(&e.annotation)))
            .collect()
    }
}

/// Generates every scene of the plan and writes images, sidecars and the manifest.
pub fn build_dataset(spec: &SceneSpec, plan: &SplitPlan, master_seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    plan.validate(spec.texture_seed_groups)?;

    let mut groups: Vec<usize> = (0..spec.texture_seed_groups).collect();
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(master_seed, GROUP_STREAM)));
    let [g_train, g_val, _] = plan.group_counts(groups.len());
    let split_groups = [
        &groups[..g_train],
        &groups[g_train..g_train + g_val],
        &groups[g_train + g_val..],
    ];

    for split in Split::ALL {
        let dir = out_dir.join("samples").join(split.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }

    let mut entries = Vec::with_capacity(plan.train + plan.val + plan.test);
    let mut index = 0u64;
    for (split, owned) in Split::ALL.into_iter().zip(split_groups) {
        for j in 0..plan.count(split) {
            let group_id = owned[j % owned.len()];
            let seed = mix_seed(master_seed, index);
            let sample = sparsify_labels(generate_scene(spec, seed, group_id)?, spec, seed)?;
            let stem = Path::new("samples").join(split.name()).join(format!("{index:05}"));
            let entry = ManifestEntry {
                image: stem.with_extension("png"),
                annotation: stem.with_extension("json"),
                split,
                group_id,
                seed,
            };
            save_sample(&sample, &out_dir.join(&entry.image), &out_dir.join(&entry.annotation))?;
            entries.push(entry);
            index += 1;
        }
    }

    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        spec: spec.clone(),
        plan: *plan,
        master_seed,
        samples: entries,
        root: out_dir.to_path_buf(),
    };
    let path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    center: Keypoint,
    mask: MaskRle,
}

#[derive(Serialize, Deserialize)]
struct Annotation {
    height: usize,
    width: usize,
    group_id: usize,
    instances: Vec<InstanceRecord>,
    sparse_labels: KeypointSet,
    station_map: LabelRle,
    station_presence: [bool; STATIONS],
}

pub fn save_sample(sample: &Sample, image_path: &Path, annotation_path: &Path) -> Result<()> {
    let (h, w) = (sample.height(), sample.width());
    let mut rgb = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                rgb.push((sample.image.get(ch, r, c) * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    let file = fs::File::create(image_path).map_err(|e| Error::io(image_path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Format { path: image_path.to_path_buf(), message: e.to_string() };
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(&rgb).map_err(png_err)?;
    writer.finish().map_err(png_err)?;

    let annotation = Annotation {
        height: h,
        width: w,
        group_id: sample.group_id,
        instances: sample
            .instances
            .iter()
            .map(|i| InstanceRecord {
                center: i.center,
                mask: MaskRle::encode(h, w, i.mask.data()),
            })
            .collect(),
        sparse_labels: sample.sparse_labels.clone(),
        station_map: LabelRle::encode(h, w, sample.station_map.labels()),
        station_presence: sample.station_presence,
    };
    let json = serde_json::to_string(&annotation).expect("annotation serializes");
    fs::write(annotation_path, json + "\n").map_err(|e| Error::io(annotation_path, e))
}

pub fn load_sample(image_path: &Path, annotation_path: &Path) -> Result<Sample> {
    let text = fs::read_to_string(annotation_path).map_err(|e| Error::io(annotation_path, e))?;
    let bad = |m: String| Error::Format { path: annotation_path.to_path_buf(), message: m };
    let ann: Annotation = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;

    let file = fs::File::open(image_path).map_err(|e| Error::io(image_path, e))?;
    let png_bad = |m: String| Error::Format { path: image_path.to_path_buf(), message: m };
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| png_bad(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| png_bad("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_bad(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(png_bad(format!("expected 8-bit RGB, got {:?} {:?}", info.color_type, info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    if (h, w) != (ann.height, ann.width) {
        return Err(bad(format!("annotation is {}x{}, image is {h}x{w}", ann.height, ann.width)));
    }
    let mut image = Planes::zeros(3, h, w);
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                image.set(ch, r, c, buf[(r * w + c) * 3 + ch] as f64 / 255.0);
            }
        }
    }

    let mut instances = Vec::with_capacity(ann.instances.len());
    for rec in ann.instances {
        rec.center.check_bounds(h, w)?;
        let mask = BinaryMask::from_vec(h, w, rec.mask.decode()?)?;
        instances.push(Instance { center: rec.center, mask });
    }
    ann.sparse_labels.check_bounds(h, w)?;
    let station_map = StationMap::new(h, w, ann.station_map.decode()?)?;
    Ok(Sample {
        image,
        instances,
        sparse_labels: ann.sparse_labels,
        station_map,
        station_presence: ann.station_presence,
        group_id: ann.group_id,
    })
}
