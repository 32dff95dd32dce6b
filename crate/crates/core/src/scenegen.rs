//! Deterministic synthetic street-scene generator with a temporal drift
//! schedule, plus the non-IID partitioner that splits each round's image
//! pool across clients.
//!
//! Scenes are horizontal sky/building/road bands with up to three
//! rectangular "vehicle" blobs. Per-pixel features are the pixel class's
//! phase-specific mean plus Gaussian noise; drift rotates and shifts those
//! means between phases so that a model fitted to one phase degrades on the
//! next.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::derive_seed;
use crate::segnet::{Batch, ModelConfig};

/// Shape and noise parameters of the generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub width: usize,
    pub height: usize,
    pub feature_dim: usize,
    pub class_count: usize,
    /// Stddev of the Gaussian feature noise around each class mean.
    pub noise_sigma: f64,
    /// Minimum allowed pairwise distance between class feature means.
    pub mean_separation: f64,
    /// Rotation of the class means (radians) applied per drift phase.
    pub drift_angle: f64,
    /// Shift added to the trailing feature dimension per drift phase.
    pub drift_shift: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            width: 16,
            height: 16,
            feature_dim: 3,
            class_count: 6,
            noise_sigma: 0.6,
            mean_separation: 1.0,
            drift_angle: std::f64::consts::FRAC_PI_3,
            drift_shift: 0.8,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 4 || self.height < 4 {
            return Err(Error::InvalidConfig("scene must be at least 4x4".into()));
        }
        if self.feature_dim < 2 {
            return Err(Error::InvalidConfig("feature_dim must be >= 2".into()));
        }
        if self.class_count < 3 {
            return Err(Error::InvalidConfig(
                "generator needs >= 3 classes (sky, building, road)".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-phase feature geometry: class means, class priors, and the seed
/// offset that decorrelates scene layouts across phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseParams {
    pub phase: usize,
    pub class_means: Vec<Vec<f64>>,
    pub class_priors: Vec<f64>,
    pub geometry_seed: u64,
}

impl PhaseParams {
    /// Deterministic phase parameters: means sit on a circle of radius 2 in
    /// the first two feature dimensions, rotated by `drift_angle * phase`,
    /// with the last dimension shifted by `drift_shift * phase`. Priors are
    /// re-mixed from the phase seed.
    pub fn for_phase(gen: &GeneratorConfig, phase: usize, seed: u64) -> Result<Self> {
        gen.validate()?;
        let k = gen.class_count;
        let radius = 2.0;
        let rot = gen.drift_angle * phase as f64;
        let mut class_means = Vec::with_capacity(k);
        for ki in 0..k {
            let theta = std::f64::consts::TAU * ki as f64 / k as f64 + rot;
            let mut mean = vec![0.0; gen.feature_dim];
            mean[0] = radius * theta.cos();
            mean[1] = radius * theta.sin();
            if gen.feature_dim > 2 {
                let last = gen.feature_dim - 1;
                mean[last] = gen.drift_shift * phase as f64
                    + 0.5 * (2.0 * ki as f64 / (k - 1) as f64 - 1.0);
            }
            class_means.push(mean);
        }

        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "priors", phase as u64, 0));
        let raw: Vec<f64> = (0..k).map(|_| 1.0 + rng.random_range(0.0..0.5)).collect();
        let total: f64 = raw.iter().sum();
        let class_priors = raw.into_iter().map(|v| v / total).collect();

        let params = PhaseParams {
            phase,
            class_means,
            class_priors,
            geometry_seed: derive_seed(seed, "geometry", phase as u64, 0),
        };
        params.validate(gen)?;
        Ok(params)
    }

    pub fn validate(&self, gen: &GeneratorConfig) -> Result<()> {
        let sum: f64 = self.class_priors.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("class priors sum to {sum}")));
        }
        for i in 0..self.class_means.len() {
            for j in (i + 1)..self.class_means.len() {
                let dist: f64 = self.class_means[i]
                    .iter()
                    .zip(&self.class_means[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if dist < gen.mean_separation {
                    return Err(Error::InvalidConfig(format!(
                        "class means {i} and {j} are only {dist:.4} apart"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Phase boundaries over the training rounds 1..=total_rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSchedule {
    /// (first round of phase, phase params), start rounds strictly increasing.
    pub phases: Vec<(usize, PhaseParams)>,
    pub total_rounds: usize,
}

impl DriftSchedule {
    /// Splits `total_rounds` into `phase_count` near-equal stationary phases.
    pub fn uniform(
        gen: &GeneratorConfig,
        phase_count: usize,
        total_rounds: usize,
        seed: u64,
    ) -> Result<Self> {
        if phase_count == 0 || total_rounds < phase_count {
            return Err(Error::InvalidConfig(format!(
                "cannot fit {phase_count} phases into {total_rounds} rounds"
            )));
        }
        let mut phases = Vec::with_capacity(phase_count);
        for p in 0..phase_count {
            let start = 1 + p * total_rounds / phase_count;
            phases.push((start, PhaseParams::for_phase(gen, p, seed)?));
        }
        let schedule = DriftSchedule {
            phases,
            total_rounds,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::InvalidConfig("empty drift schedule".into()));
        }
        if self.phases[0].0 != 1 {
            return Err(Error::InvalidConfig("first phase must start at round 1".into()));
        }
        for w in self.phases.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::InvalidConfig(
                    "phase start rounds must be strictly increasing".into(),
                ));
            }
        }
        if self.phases.last().unwrap().0 > self.total_rounds {
            return Err(Error::InvalidConfig(
                "last phase starts after the final round".into(),
            ));
        }
        Ok(())
    }

    pub fn phase_count(&self) -> usize {
        self.phases.len()
    }

    /// The phase whose round interval contains `round`.
    pub fn phase_at(&self, round: usize) -> Result<&PhaseParams> {
        if round == 0 || round > self.total_rounds {
            return Err(Error::OutOfRange(format!(
                "round {round} outside 1..={}",
                self.total_rounds
            )));
        }
        let idx = self
            .phases
            .iter()
            .rposition(|(start, _)| *start <= round)
            .expect("first phase starts at round 1");
        Ok(&self.phases[idx].1)
    }

    /// Index of the phase active at `round`.
    pub fn phase_index_at(&self, round: usize) -> Result<usize> {
        self.phase_at(round).map(|p| p.phase)
    }
}

/// One synthetic image: per-pixel features and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    pub width: usize,
    pub height: usize,
    /// `width * height * feature_dim` values, pixel-major.
    pub features: Vec<f64>,
    /// `width * height` labels, row-major.
    pub labels: Vec<usize>,
    pub phase: usize,
    pub image_id: u64,
}

impl LabeledScene {
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// One client's image set for a round.
#[derive(Debug, Clone)]
pub struct ClientShard {
    pub client_id: usize,
    pub scenes: Vec<LabeledScene>,
}

fn sample_categorical<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Procedurally generates one labeled scene, deterministic in
/// `(phase, image_id, seed)`.
pub fn generate_scene(
    gen: &GeneratorConfig,
    phase: &PhaseParams,
    image_id: u64,
    seed: u64,
) -> LabeledScene {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(
        seed ^ phase.geometry_seed,
        "scene",
        image_id,
        phase.phase as u64,
    ));
    let (w, h, k) = (gen.width, gen.height, gen.class_count);

    // Band layout: sky (class 0), building (1), road (2).
    let b1 = rng.random_range(h / 4..h / 2);
    let b2 = rng.random_range(h / 2..3 * h / 4);
    let mut labels = vec![0usize; w * h];
    for row in 0..h {
        let class = if row < b1 {
            0
        } else if row < b2 {
            1
        } else {
            2
        };
        for col in 0..w {
            labels[row * w + col] = class;
        }
    }

    // Up to three rectangular blobs with classes drawn from the phase prior
    // over the non-band classes.
    if k > 3 {
        let blob_count = rng.random_range(0..=3usize);
        let blob_priors = &phase.class_priors[3..];
        for _ in 0..blob_count {
            let class = 3 + sample_categorical(&mut rng, blob_priors);
            let bh = rng.random_range(2..=4usize).min(h - b1);
            let bw = rng.random_range(2..=4usize).min(w);
            let row0 = rng.random_range(b1..=h - bh);
            let col0 = rng.random_range(0..=w - bw);
            for row in row0..row0 + bh {
                for col in col0..col0 + bw {
                    labels[row * w + col] = class;
                }
            }
        }
    }

    let mut features = Vec::with_capacity(w * h * gen.feature_dim);
    for &label in &labels {
        for d in 0..gen.feature_dim {
            let noise: f64 = if gen.noise_sigma > 0.0 {
                let n: f64 = StandardNormal.sample(&mut rng);
                gen.noise_sigma * n
            } else {
                0.0
            };
            features.push(phase.class_means[label][d] + noise);
        }
    }

    LabeledScene {
        width: w,
        height: h,
        features,
        labels,
        phase: phase.phase,
        image_id,
    }
}

/// Generates `count` scenes with consecutive ids starting at `first_id`.
pub fn generate_scenes(
    gen: &GeneratorConfig,
    phase: &PhaseParams,
    first_id: u64,
    count: usize,
    seed: u64,
) -> Vec<LabeledScene> {
    (0..count)
        .map(|i| generate_scene(gen, phase, first_id + i as u64, seed))
        .collect()
}

/// The label occurring most often in the scene (ties go to the smaller
/// class id). Used as the image's class key for non-IID partitioning.
pub fn dominant_class(scene: &LabeledScene, class_count: usize) -> usize {
    let mut counts = vec![0usize; class_count];
    for &l in &scene.labels {
        counts[l] += 1;
    }
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

/// Image-level non-IID partition: per dominant-class group, client
/// proportions are drawn from a symmetric Dirichlet(alpha) and images are
/// assigned accordingly. The result is a true partition with every shard
/// nonempty.
pub fn partition(
    scenes: Vec<LabeledScene>,
    class_count: usize,
    client_count: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    if client_count < 1 {
        return Err(Error::InvalidConfig("client_count must be >= 1".into()));
    }
    if alpha <= 0.0 {
        return Err(Error::InvalidConfig(format!("alpha must be > 0, got {alpha}")));
    }
    if scenes.len() < client_count {
        return Err(Error::InvalidConfig(format!(
            "{} images cannot cover {} clients",
            scenes.len(),
            client_count
        )));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "partition", 0, 0));
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::InvalidConfig(format!("bad Dirichlet alpha: {e}")))?;

    // Group image indices by dominant class.
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (i, scene) in scenes.iter().enumerate() {
        groups[dominant_class(scene, class_count)].push(i);
    }

    let mut assignment = vec![0usize; scenes.len()];
    for group in &groups {
        if group.is_empty() {
            continue;
        }
        // Symmetric Dirichlet via normalized Gamma draws.
        let draws: Vec<f64> = (0..client_count)
            .map(|_| gamma.sample(&mut rng).max(1e-300))
            .collect();
        let total: f64 = draws.iter().sum();

        // Largest-remainder quotas keep realized shard fractions close to
        // the drawn proportions even for small groups.
        let mut quotas: Vec<usize> = Vec::with_capacity(client_count);
        let mut fractions: Vec<(usize, f64)> = Vec::with_capacity(client_count);
        let mut assigned = 0usize;
        for (c, &d) in draws.iter().enumerate() {
            let exact = d / total * group.len() as f64;
            let floor = exact.floor() as usize;
            quotas.push(floor);
            fractions.push((c, exact - floor as f64));
            assigned += floor;
        }
        fractions.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for &(c, _) in fractions.iter().take(group.len() - assigned) {
            quotas[c] += 1;
        }

        let mut order = group.clone();
        order.shuffle(&mut rng);
        let mut cursor = 0;
        for (c, &quota) in quotas.iter().enumerate() {
            for _ in 0..quota {
                assignment[order[cursor]] = c;
                cursor += 1;
            }
        }
    }

    let mut shards: Vec<ClientShard> = (0..client_count)
        .map(|client_id| ClientShard {
            client_id,
            scenes: Vec::new(),
        })
        .collect();
    for (scene, client) in scenes.into_iter().zip(&assignment) {
        shards[*client].scenes.push(scene);
    }

    // Rebalance so no shard is empty: move one image at a time from the
    // currently largest shard.
    for c in 0..client_count {
        while shards[c].scenes.is_empty() {
            let donor = (0..client_count)
                .max_by_key(|&i| shards[i].scenes.len())
                .unwrap();
            if shards[donor].scenes.len() <= 1 {
                return Err(Error::InvalidConfig(
                    "not enough images to give every client one".into(),
                ));
            }
            let scene = shards[donor].scenes.pop().unwrap();
            shards[c].scenes.push(scene);
        }
    }
    Ok(shards)
}

/// Flattens scenes into a single training batch for the given model shape.
pub fn batch_from_scenes(scenes: &[&LabeledScene], model: &ModelConfig) -> Result<Batch> {
    if scenes.is_empty() {
        return Err(Error::InvalidInput("no scenes to batch".into()));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut image_ids = Vec::new();
    for scene in scenes {
        features.extend_from_slice(&scene.features);
        labels.extend_from_slice(&scene.labels);
        image_ids.push(scene.image_id);
    }
    Batch::new(
        features,
        labels,
        model.feature_dim,
        model.class_count,
        image_ids,
    )
}

const SCENE_MAGIC: &[u8; 4] = b"FSCN";
const SCENE_FORMAT_VERSION: u32 = 1;

/// Human-readable companion to the binary scene file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneManifest {
    pub format_version: u32,
    pub width: usize,
    pub height: usize,
    pub feature_dim: usize,
    pub class_count: usize,
    pub scene_count: usize,
    pub scenes: Vec<SceneManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneManifestEntry {
    pub image_id: u64,
    pub phase: usize,
}

/// Writes scenes as a flat little-endian binary file plus a JSON manifest.
pub fn export_scenes(
    gen: &GeneratorConfig,
    scenes: &[LabeledScene],
    binary_path: &Path,
    manifest_path: &Path,
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(binary_path)?);
    out.write_all(SCENE_MAGIC)?;
    out.write_all(&SCENE_FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(gen.width as u32).to_le_bytes())?;
    out.write_all(&(gen.height as u32).to_le_bytes())?;
    out.write_all(&(gen.feature_dim as u32).to_le_bytes())?;
    out.write_all(&(gen.class_count as u32).to_le_bytes())?;
    out.write_all(&(scenes.len() as u64).to_le_bytes())?;
    for scene in scenes {
        out.write_all(&scene.image_id.to_le_bytes())?;
        out.write_all(&(scene.phase as u32).to_le_bytes())?;
        for v in &scene.features {
            out.write_all(&v.to_le_bytes())?;
        }
        for &l in &scene.labels {
            out.write_all(&(l as u32).to_le_bytes())?;
        }
    }
    out.flush()?;

    let manifest = SceneManifest {
        format_version: SCENE_FORMAT_VERSION,
        width: gen.width,
        height: gen.height,
        feature_dim: gen.feature_dim,
        class_count: gen.class_count,
        scene_count: scenes.len(),
        scenes: scenes
            .iter()
            .map(|s| SceneManifestEntry {
                image_id: s.image_id,
                phase: s.phase,
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::InvalidInput(format!("manifest serialization: {e}")))?;
    std::fs::write(manifest_path, json)?;
    Ok(())
}

/// Reads back a binary scene file written by [`export_scenes`].
pub fn import_scenes(binary_path: &Path) -> Result<Vec<LabeledScene>> {
    let mut input = std::io::BufReader::new(std::fs::File::open(binary_path)?);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != SCENE_MAGIC {
        return Err(Error::InvalidInput("bad scene file magic".into()));
    }
    fn read_u32(input: &mut impl Read) -> Result<u32> {
        let mut buf = [0u8; 4];
        input.read_exact(&mut buf)?;
        Ok(u32::from_le_bytes(buf))
    }
    fn read_u64(input: &mut impl Read) -> Result<u64> {
        let mut buf = [0u8; 8];
        input.read_exact(&mut buf)?;
        Ok(u64::from_le_bytes(buf))
    }

    let version = read_u32(&mut input)?;
    if version != SCENE_FORMAT_VERSION {
        return Err(Error::InvalidInput(format!(
            "unsupported scene format version {version}"
        )));
    }
    let width = read_u32(&mut input)? as usize;
    let height = read_u32(&mut input)? as usize;
    let feature_dim = read_u32(&mut input)? as usize;
    let _class_count = read_u32(&mut input)? as usize;
    let count = read_u64(&mut input)? as usize;

    let mut scenes = Vec::with_capacity(count);
    let pixels = width * height;
    for _ in 0..count {
        let image_id = read_u64(&mut input)?;
        let phase = read_u32(&mut input)? as usize;
        let mut features = Vec::with_capacity(pixels * feature_dim);
        for _ in 0..pixels * feature_dim {
            features.push(f64::from_bits(read_u64(&mut input)?));
        }
        let mut labels = Vec::with_capacity(pixels);
        for _ in 0..pixels {
            labels.push(read_u32(&mut input)? as usize);
        }
        scenes.push(LabeledScene {
            width,
            height,
            features,
            labels,
            phase,
            image_id,
        });
    }
    Ok(scenes)
}
