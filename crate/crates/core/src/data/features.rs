//! Per-video feature tensors and the on-disk feature bundle.
//!
//! A bundle is a directory holding `manifest.json` plus one raw
//! little-endian `f32` file per tensor. Tensors are row-major.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BUNDLE_FORMAT: &str = "lsg-feature-bundle";
pub const DTYPE_F32LE: &str = "f32le";

#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    pub video_id: String,
    /// `[T × Da]`
    pub appearance: Array2<f64>,
    /// `[T × Dm]`
    pub motion: Array2<f64>,
    /// `[T × N × Dr]`
    pub regions: Array3<f64>,
}

impl VideoFeatures {
    pub fn new(
        video_id: impl Into<String>,
        appearance: Array2<f64>,
        motion: Array2<f64>,
        regions: Array3<f64>,
    ) -> Result<Self> {
        let v = VideoFeatures {
            video_id: video_id.into(),
            appearance,
            motion,
            regions,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn frames(&self) -> usize {
        self.appearance.nrows()
    }

    pub fn regions_per_frame(&self) -> usize {
        self.regions.dim().1
    }

    pub fn dims(&self) -> FeatureDims {
        FeatureDims {
            appearance: self.appearance.ncols(),
            motion: self.motion.ncols(),
            region: self.regions.dim().2,
        }
    }

    /// Regions flattened to `[L × Dr]` with `L = T·N`, frame-major.
    pub fn regions_flat(&self) -> Array2<f64> {
        let (t, n, d) = self.regions.dim();
        self.regions
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((t * n, d))
            .expect("contiguous regions")
    }

    pub fn validate(&self) -> Result<()> {
        let shape_err = |message: String| Error::Shape {
            video_id: self.video_id.clone(),
            message,
        };
        let t = self.appearance.nrows();
        let (rt, n, _) = self.regions.dim();
        if t == 0 {
            return Err(shape_err("no frames".into()));
        }
        if n == 0 {
            return Err(shape_err("no regions per frame".into()));
        }
        if self.motion.nrows() != t || rt != t {
            return Err(shape_err(format!(
                "frame counts disagree: appearance {t}, motion {}, regions {rt}",
                self.motion.nrows()
            )));
        }
        for (name, ok) in [
            ("appearance", self.appearance.iter().all(|v| v.is_finite())),
            ("motion", self.motion.iter().all(|v| v.is_finite())),
            ("regions", self.regions.iter().all(|v| v.is_finite())),
        ] {
            if !ok {
                return Err(Error::NonFiniteFeature {
                    video_id: self.video_id.clone(),
                    tensor: name,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub appearance: usize,
    pub motion: usize,
    pub region: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format: String,
    pub version: u32,
    pub videos: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    pub dtype: String,
    pub frames: usize,
    pub regions: usize,
    pub appearance_dim: usize,
    pub motion_dim: usize,
    pub region_dim: usize,
    pub appearance_file: String,
    pub motion_file: String,
    pub region_file: String,
}

fn read_f32le(path: &Path, expected: usize, video_id: &str, tensor: &str) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Shape {
            video_id: video_id.to_string(),
            message: format!(
                "{tensor}: manifest declares {expected} values, file holds {} bytes",
                bytes.len()
            ),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn write_f32le<'a>(path: &Path, values: impl Iterator<Item = &'a f64>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads every video listed in `dir/manifest.json`.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<Vec<VideoFeatures>> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: BundleManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        what: manifest_path.display().to_string(),
        message: e.to_string(),
    })?;
    if manifest.format != BUNDLE_FORMAT {
        return Err(Error::Parse {
            what: manifest_path.display().to_string(),
            message: format!("unknown format tag {:?}", manifest.format),
        });
    }
    manifest
        .videos
        .iter()
        .map(|entry| load_entry(dir, entry))
        .collect()
}

fn load_entry(dir: &Path, e: &ManifestEntry) -> Result<VideoFeatures> {
    if e.dtype != DTYPE_F32LE {
        return Err(Error::Shape {
            video_id: e.video_id.clone(),
            message: format!("unsupported dtype {:?}", e.dtype),
        });
    }
    let app = read_f32le(
        &dir.join(&e.appearance_file),
        e.frames * e.appearance_dim,
        &e.video_id,
        "appearance",
    )?;
    let mot = read_f32le(
        &dir.join(&e.motion_file),
        e.frames * e.motion_dim,
        &e.video_id,
        "motion",
    )?;
    let reg = read_f32le(
        &dir.join(&e.region_file),
        e.frames * e.regions * e.region_dim,
        &e.video_id,
        "regions",
    )?;
    let shape_err = |m: ndarray::ShapeError| Error::Shape {
        video_id: e.video_id.clone(),
        message: m.to_string(),
    };
    VideoFeatures::new(
        e.video_id.clone(),
        Array2::from_shape_vec((e.frames, e.appearance_dim), app).map_err(shape_err)?,
        Array2::from_shape_vec((e.frames, e.motion_dim), mot).map_err(shape_err)?,
        Array3::from_shape_vec((e.frames, e.regions, e.region_dim), reg).map_err(shape_err)?,
    )
}

/// Writes `videos` as a bundle into `dir` (created if missing).
pub fn write_bundle(dir: impl AsRef<Path>, videos: &[VideoFeatures]) -> Result<()> {
    let dir = dir.as_ref();
    let arrays = dir.join("arrays");
    fs::create_dir_all(&arrays).map_err(|e| Error::io(&arrays, e))?;
    let mut entries = Vec::with_capacity(videos.len());
    for (i, v) in videos.iter().enumerate() {
        v.validate()?;
        let dims = v.dims();
        let entry = ManifestEntry {
            video_id: v.video_id.clone(),
            dtype: DTYPE_F32LE.to_string(),
            frames: v.frames(),
            regions: v.regions_per_frame(),
            appearance_dim: dims.appearance,
            motion_dim: dims.motion,
            region_dim: dims.region,
            appearance_file: format!("arrays/{i:06}.appearance.f32"),
            motion_file: format!("arrays/{i:06}.motion.f32"),
            region_file: format!("arrays/{i:06}.regions.f32"),
        };
        write_f32le(&dir.join(&entry.appearance_file), v.appearance.iter())?;
        write_f32le(&dir.join(&entry.motion_file), v.motion.iter())?;
        write_f32le(
            &dir.join(&entry.region_file),
            v.regions.as_standard_layout().iter(),
        )?;
        entries.push(entry);
    }
    let manifest = BundleManifest {
        format: BUNDLE_FORMAT.to_string(),
        version: 1,
        videos: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video(id: &str, t: usize, n: usize) -> VideoFeatures {
        VideoFeatures::new(
            id,
            Array2::from_shape_fn((t, 3), |(i, j)| (i * 3 + j) as f64 * 0.5),
            Array2::from_shape_fn((t, 2), |(i, j)| i as f64 - j as f64),
            Array3::from_shape_fn((t, n, 4), |(i, j, k)| (i + j + k) as f64 * 0.25),
        )
        .unwrap()
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vids = vec![video("a", 3, 2), video("b", 2, 1)];
        write_bundle(dir.path(), &vids).unwrap();
        assert_eq!(load_bundle(dir.path()).unwrap(), vids);
    }

    #[test]
    fn paper_scale_shapes_load() {
        let dir = tempfile::tempdir().unwrap();
        let v = VideoFeatures::new(
            "msvd",
            Array2::zeros((26, 1536)),
            Array2::zeros((26, 1024)),
            Array3::zeros((26, 36, 2048)),
        )
        .unwrap();
        write_bundle(dir.path(), std::slice::from_ref(&v)).unwrap();
        let loaded = load_bundle(dir.path()).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].appearance.dim(), (26, 1536));
        assert_eq!(loaded[0].motion.dim(), (26, 1024));
        assert_eq!(loaded[0].regions.dim(), (26, 36, 2048));
    }

    #[test]
    fn empty_manifest_is_empty_collection() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), &[]).unwrap();
        assert!(load_bundle(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn missing_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn short_array_names_the_video() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), &[video("short", 3, 2)]).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut m: BundleManifest =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        m.videos[0].frames = 4;
        fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        match load_bundle(dir.path()) {
            Err(Error::Shape { video_id, .. }) => assert_eq!(video_id, "short"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut v = video("nan", 2, 1);
        v.motion[[1, 0]] = f64::NAN;
        assert!(matches!(
            v.validate(),
            Err(Error::NonFiniteFeature { tensor: "motion", .. })
        ));
    }

    #[test]
    fn mismatched_frame_counts_are_rejected() {
        let r = VideoFeatures::new(
            "x",
            Array2::zeros((3, 2)),
            Array2::zeros((2, 2)),
            Array3::zeros((3, 1, 2)),
        );
        assert!(matches!(r, Err(Error::Shape { .. })));
    }
}
