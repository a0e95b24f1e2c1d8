//! Tracklets, dataset manifests and the synthetic toy dataset.
//!
//! A manifest is a JSON file next to an image directory; all frame paths
//! are relative to the manifest's directory. The toy generator writes
//! procedurally colored person stand-ins so the whole pipeline can be
//! exercised without any real dataset.

use crate::{derive_seed, Error, Result};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

/// Capture platform of a tracklet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PlatformTag {
    #[serde(rename = "GROUND")]
    Ground,
    #[serde(rename = "AERIAL")]
    Aerial,
}

impl std::fmt::Display for PlatformTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PlatformTag::Ground => write!(f, "GROUND"),
            PlatformTag::Aerial => write!(f, "AERIAL"),
        }
    }
}

/// One person observed by one camera: an ordered frame sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tracklet {
    pub tracklet_id: String,
    pub identity: u32,
    pub camera_id: u32,
    pub platform: PlatformTag,
    /// Image paths relative to the manifest directory.
    pub frames: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<u32>,
    pub test: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    /// Target (H, W) after resize.
    pub image_size: [usize; 2],
    pub identities: usize,
    pub splits: Splits,
    pub tracklets: Vec<Tracklet>,
    /// Directory the manifest was loaded from; frame paths resolve
    /// against it. Not part of the on-disk schema.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl PartialEq for DatasetManifest {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.image_size == other.image_size
            && self.identities == other.identities
            && self.splits == other.splits
            && self.tracklets == other.tracklets
    }
}

impl DatasetManifest {
    pub fn frame_path(&self, tracklet: &Tracklet, frame: usize) -> PathBuf {
        self.base_dir.join(&tracklet.frames[frame])
    }

    pub fn train_tracklets(&self) -> impl Iterator<Item = (usize, &Tracklet)> {
        let train: BTreeSet<u32> = self.splits.train.iter().copied().collect();
        self.tracklets
            .iter()
            .enumerate()
            .filter(move |(_, t)| train.contains(&t.identity))
    }

    pub fn test_tracklets(&self) -> impl Iterator<Item = (usize, &Tracklet)> {
        let test: BTreeSet<u32> = self.splits.test.iter().copied().collect();
        self.tracklets
            .iter()
            .enumerate()
            .filter(move |(_, t)| test.contains(&t.identity))
    }

    /// Checks every invariant the loader promises.
    pub fn validate(&self) -> Result<()> {
        let train: BTreeSet<u32> = self.splits.train.iter().copied().collect();
        let test: BTreeSet<u32> = self.splits.test.iter().copied().collect();
        if let Some(overlap) = train.intersection(&test).next() {
            return Err(Error::Validation(format!(
                "identity {overlap} appears in both train and test splits"
            )));
        }
        let mut ids = BTreeSet::new();
        for t in &self.tracklets {
            if t.frames.is_empty() {
                return Err(Error::Validation(format!(
                    "tracklet {} has no frames",
                    t.tracklet_id
                )));
            }
            ids.insert(t.identity);
        }
        if ids.len() != self.identities {
            return Err(Error::Validation(format!(
                "manifest declares {} identities but tracklets reference {}",
                self.identities,
                ids.len()
            )));
        }
        for id in train.union(&test) {
            if !ids.contains(id) {
                return Err(Error::Validation(format!(
                    "split references identity {id} with no tracklets"
                )));
            }
        }
        Ok(())
    }

    /// Verifies that every referenced frame file exists (pixels stay lazy).
    pub fn validate_frames(&self) -> Result<()> {
        for t in &self.tracklets {
            for f in &t.frames {
                let p = self.base_dir.join(f);
                if !p.exists() {
                    return Err(Error::Validation(format!(
                        "tracklet {}: missing frame file {}",
                        t.tracklet_id,
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Loads and validates a manifest file.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    manifest.base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    manifest.validate()?;
    manifest.validate_frames()?;
    Ok(manifest)
}

/// Writes the manifest JSON (frames are expected to exist already).
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Runtime(format!("manifest serialization: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Sorted-order stable bijection raw train label -> contiguous index.
pub fn remap_train_labels(manifest: &DatasetManifest) -> Result<BTreeMap<u32, usize>> {
    if manifest.splits.train.is_empty() {
        return Err(Error::Validation("train split is empty".into()));
    }
    let sorted: BTreeSet<u32> = manifest.splits.train.iter().copied().collect();
    Ok(sorted.into_iter().enumerate().map(|(i, id)| (id, i)).collect())
}

/// Parameters of the synthetic toy dataset.
#[derive(Debug, Clone)]
pub struct ToyConfig {
    pub n_ids: usize,
    pub frames_per_tracklet: usize,
    /// (H, W)
    pub image_size: (usize, usize),
    pub seed: u64,
    /// Fraction of identities assigned to the train split.
    pub train_fraction: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            n_ids: 16,
            frames_per_tracklet: 12,
            image_size: (64, 32),
            seed: 0,
            train_fraction: 0.5,
        }
    }
}

/// Generates a deterministic toy dataset: every identity gets one GROUND
/// and one AERIAL tracklet whose frames share an identity color/shape
/// signature, with a global per-platform tint so a platform gap exists by
/// construction.
pub fn gen_toy_dataset(out_dir: &Path, cfg: &ToyConfig) -> Result<DatasetManifest> {
    if cfg.n_ids < 2 {
        return Err(Error::Config(
            "toy dataset needs at least 2 identities for triplet mining".into(),
        ));
    }
    if cfg.frames_per_tracklet < 1 {
        return Err(Error::Config("frames_per_tracklet must be >= 1".into()));
    }
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;

    let mut tracklets = Vec::new();
    for id in 0..cfg.n_ids {
        for (cam, platform) in [(0u32, PlatformTag::Ground), (1u32, PlatformTag::Aerial)] {
            let tid = format!("id{id:04}_{}", platform.to_string().to_lowercase());
            let sub = img_dir.join(&tid);
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            let mut frames = Vec::new();
            for f in 0..cfg.frames_per_tracklet {
                let img = render_toy_frame(cfg, id, platform, f);
                let rel = format!("images/{tid}/frame_{f:03}.png");
                let abs = out_dir.join(&rel);
                img.save(&abs)
                    .map_err(|e| Error::Runtime(format!("writing {}: {e}", abs.display())))?;
                frames.push(rel);
            }
            tracklets.push(Tracklet {
                tracklet_id: tid,
                identity: id as u32,
                camera_id: cam,
                platform,
                frames,
            });
        }
    }

    // Alternate train/test over the hue ordering so held-out identities
    // sit between training ones in color space.
    let n_train = ((cfg.n_ids as f64) * cfg.train_fraction).round() as usize;
    let n_train = n_train.clamp(1, cfg.n_ids - 1);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for id in 0..cfg.n_ids {
        let want_train = id % 2 == 0 && train.len() < n_train;
        let must_train = test.len() >= cfg.n_ids - n_train;
        if want_train || must_train {
            train.push(id as u32);
        } else {
            test.push(id as u32);
        }
    }

    let manifest = DatasetManifest {
        name: format!("toy-{}ids-seed{}", cfg.n_ids, cfg.seed),
        image_size: [cfg.image_size.0, cfg.image_size.1],
        identities: cfg.n_ids,
        splits: Splits { train, test },
        tracklets,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.validate()?;
    save_manifest(&manifest, &out_dir.join("manifest.json"))?;
    Ok(manifest)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.fract() + 1.0).fract() * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Identity hue: golden-angle spacing keeps all ids far apart in color.
fn identity_color(id: usize) -> [f64; 3] {
    hsv_to_rgb(id as f64 * 0.381_966_011, 0.85, 0.9)
}

fn render_toy_frame(cfg: &ToyConfig, id: usize, platform: PlatformTag, frame: usize) -> RgbImage {
    let (h, w) = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        cfg.seed,
        &[id as u64, platform as u64, frame as u64],
    ));
    let color = identity_color(id);
    // AERIAL views are smaller and warm-tinted; GROUND views cool-tinted.
    let (tint, body_scale) = match platform {
        PlatformTag::Ground => ([0.92, 0.97, 1.08], 1.0),
        PlatformTag::Aerial => ([1.08, 1.0, 0.88], 0.72),
    };
    let body_h = ((h as f64) * 0.55 * body_scale) as i64;
    let body_w = ((w as f64) * 0.5 * body_scale) as i64;
    // Head blob: a second, shape-level cue tied to identity.
    let head_r = ((w as f64) * (0.10 + 0.05 * ((id % 3) as f64))) as i64;

    let jitter_y = rng.gen_range(-2..=2i64);
    let jitter_x = rng.gen_range(-2..=2i64);
    let brightness = rng.gen_range(0.9..1.1f64);
    let cy = h as i64 / 2 + jitter_y;
    let cx = w as i64 / 2 + jitter_x;

    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut px = [0.62, 0.62, 0.62]; // background
            let in_body = (y - cy).abs() <= body_h / 2 && (x - cx).abs() <= body_w / 2;
            let head_cy = cy - body_h / 2 - head_r;
            let in_head = (y - head_cy).pow(2) + (x - cx).pow(2) <= head_r.pow(2);
            if in_body {
                px = color;
            } else if in_head {
                px = [
                    color[0] * 0.5 + 0.3,
                    color[1] * 0.5 + 0.3,
                    color[2] * 0.5 + 0.3,
                ];
            }
            let noise = rng.gen_range(-0.02..0.02f64);
            let out = [0, 1, 2].map(|c| {
                let v = (px[c] * brightness + noise) * tint[c];
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, Rgb(out));
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};
    use tempfile::TempDir;

    fn toy(dir: &Path, n_ids: usize, frames: usize, seed: u64) -> DatasetManifest {
        gen_toy_dataset(
            dir,
            &ToyConfig {
                n_ids,
                frames_per_tracklet: frames,
                image_size: (32, 16),
                seed,
                ..ToyConfig::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn toy_counts_are_forced_by_input() {
        let dir = TempDir::new().unwrap();
        let m = gen_toy_dataset(
            dir.path(),
            &ToyConfig {
                n_ids: 16,
                frames_per_tracklet: 12,
                image_size: (64, 32),
                seed: 1,
                ..ToyConfig::default()
            },
        )
        .unwrap();
        assert_eq!(m.tracklets.len(), 32);
        assert_eq!(m.identities, 16);
        let n_images: usize = m.tracklets.iter().map(|t| t.frames.len()).sum();
        assert_eq!(n_images, 384);
    }

    #[test]
    fn four_ids_two_platforms() {
        let dir = TempDir::new().unwrap();
        let m = toy(dir.path(), 4, 2, 3);
        assert_eq!(m.tracklets.len(), 8);
        assert_eq!(m.identities, 4);
    }

    #[test]
    fn single_identity_rejected() {
        let dir = TempDir::new().unwrap();
        let err = gen_toy_dataset(
            dir.path(),
            &ToyConfig {
                n_ids: 1,
                ..ToyConfig::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let d1 = TempDir::new().unwrap();
        let d2 = TempDir::new().unwrap();
        let m1 = toy(d1.path(), 3, 2, 42);
        let m2 = toy(d2.path(), 3, 2, 42);
        for (t1, t2) in m1.tracklets.iter().zip(&m2.tracklets) {
            for (f1, f2) in t1.frames.iter().zip(&t2.frames) {
                let b1 = std::fs::read(d1.path().join(f1)).unwrap();
                let b2 = std::fs::read(d2.path().join(f2)).unwrap();
                assert_eq!(
                    Sha256::digest(&b1),
                    Sha256::digest(&b2),
                    "frame bytes differ for {f1}"
                );
            }
        }
        let m3 = toy(d1.path(), 3, 2, 43);
        assert_ne!(m1, m3);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = TempDir::new().unwrap();
        let m = toy(dir.path(), 4, 3, 7);
        let loaded = load_manifest(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(m, loaded);
        // save -> load again is also stable
        save_manifest(&loaded, &dir.path().join("manifest2.json")).unwrap();
        let again = load_manifest(&dir.path().join("manifest2.json")).unwrap();
        assert_eq!(loaded, again);
    }

    #[test]
    fn split_overlap_is_rejected() {
        let dir = TempDir::new().unwrap();
        let mut m = toy(dir.path(), 4, 1, 0);
        m.splits.train = vec![0, 3];
        m.splits.test = vec![1, 2, 3];
        let err = m.validate().unwrap_err();
        match err {
            Error::Validation(msg) => assert!(msg.contains('3'), "{msg}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn missing_frame_file_is_reported() {
        let dir = TempDir::new().unwrap();
        let m = toy(dir.path(), 2, 1, 0);
        let victim = dir.path().join(&m.tracklets[0].frames[0]);
        std::fs::remove_file(&victim).unwrap();
        let err = load_manifest(&dir.path().join("manifest.json")).unwrap_err();
        match err {
            Error::Validation(msg) => assert!(msg.contains("missing frame"), "{msg}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn remap_is_sorted_and_bijective() {
        let dir = TempDir::new().unwrap();
        let mut m = toy(dir.path(), 12, 1, 5);
        m.splits.train = vec![5, 9, 2];
        m.splits.test = vec![0, 1, 3];
        let map = remap_train_labels(&m).unwrap();
        assert_eq!(map[&2], 0);
        assert_eq!(map[&5], 1);
        assert_eq!(map[&9], 2);

        // identity case
        m.splits.train = vec![0, 1, 2, 3];
        let map = remap_train_labels(&m).unwrap();
        for i in 0..4u32 {
            assert_eq!(map[&i], i as usize);
        }
    }

    #[test]
    fn remap_random_labels_bijection_oracle() {
        let dir = TempDir::new().unwrap();
        let mut m = toy(dir.path(), 50, 1, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut labels: Vec<u32> = (0..50).collect();
        labels.retain(|_| rng.gen_bool(0.6));
        m.splits.train = labels.clone();
        m.splits.test = (0..50u32).filter(|i| !labels.contains(i)).collect();
        let map = remap_train_labels(&m).unwrap();
        // oracle: the image of the mapping is exactly 0..k, each hit once
        let mut targets: Vec<usize> = map.values().copied().collect();
        targets.sort_unstable();
        assert_eq!(targets, (0..labels.len()).collect::<Vec<_>>());
        assert_eq!(map.len(), labels.len());
    }

    #[test]
    fn cross_platform_completeness_of_toys() {
        let dir = TempDir::new().unwrap();
        let m = toy(dir.path(), 6, 1, 8);
        for &id in &m.splits.test {
            let has_ground = m
                .tracklets
                .iter()
                .any(|t| t.identity == id && t.platform == PlatformTag::Ground);
            let has_aerial = m
                .tracklets
                .iter()
                .any(|t| t.identity == id && t.platform == PlatformTag::Aerial);
            assert!(has_ground && has_aerial);
        }
    }
}
