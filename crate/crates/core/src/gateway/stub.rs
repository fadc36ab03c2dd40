use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{ClassifierBackend, GatewayError, ImageRef, ModelRole, RawScores, SCENE_OTHER, SCENE_WHITELIST};
use crate::class::BuildingClass;

/// Deterministic offline classifier.
///
/// For each image it answers, in order of precedence:
/// 1. `<image>.labels.json` next to the image,
/// 2. `<labels_dir>/<sha256 of image bytes>.labels.json`,
/// 3. a pseudo-random distribution seeded by the image content hash.
///
/// A label file is either a flat `{label: prob}` object used for both roles,
/// or `{"scene": {..}, "building": {..}}` with per-role entries.
#[derive(Debug, Clone, Default)]
pub struct StubBackend {
    labels_dir: Option<PathBuf>,
}

impl StubBackend {
    pub fn new(labels_dir: Option<PathBuf>) -> Self {
        StubBackend { labels_dir }
    }

    fn sidecar(&self, path: &Path, digest: &[u8]) -> Option<PathBuf> {
        let mut beside = path.as_os_str().to_owned();
        beside.push(".labels.json");
        let beside = PathBuf::from(beside);
        if beside.is_file() {
            return Some(beside);
        }
        let dir = self.labels_dir.as_ref()?;
        let keyed = dir.join(format!("{}.labels.json", hex::encode(digest)));
        keyed.is_file().then_some(keyed)
    }

    fn scores_for(&self, role: ModelRole, img: &ImageRef) -> RawScores {
        let bytes = fs::read(&img.path).map_err(|e| format!("unreadable image: {e}"))?;
        let digest = Sha256::digest(&bytes);
        if let Some(path) = self.sidecar(&img.path, &digest) {
            let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            let value: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
            if let Some(scores) = sidecar_scores(&value, role).map_err(|e| format!("{}: {e}", path.display()))? {
                return Ok(scores);
            }
        }
        Ok(seeded_scores(role, &digest))
    }
}

/// `Ok(None)` when a role-keyed file has no entry for `role`.
fn sidecar_scores(value: &serde_json::Value, role: ModelRole) -> Result<Option<BTreeMap<String, f64>>, String> {
    let obj = value.as_object().ok_or("label file must be a JSON object")?;
    let role_keyed = !obj.is_empty()
        && obj
            .iter()
            .all(|(k, v)| (k == "scene" || k == "building") && v.is_object());
    let map = if role_keyed {
        match obj.get(role.as_str()) {
            Some(v) => v.as_object().expect("checked above"),
            None => return Ok(None),
        }
    } else {
        obj
    };
    map.iter()
        .map(|(k, v)| {
            v.as_f64()
                .map(|p| (k.clone(), p))
                .ok_or_else(|| format!("probability for `{k}` is not a number"))
        })
        .collect::<Result<_, _>>()
        .map(Some)
}

/// Dirichlet(1) draw over the role's stub label set.
fn seeded_scores(role: ModelRole, digest: &[u8]) -> BTreeMap<String, f64> {
    let labels: Vec<String> = match role {
        ModelRole::Building => BuildingClass::labels(),
        ModelRole::Scene => SCENE_WHITELIST
            .iter()
            .copied()
            .chain(std::iter::once(SCENE_OTHER))
            .map(str::to_string)
            .collect(),
    };
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest[..32]);
    seed[0] ^= match role {
        ModelRole::Scene => 0x5c,
        ModelRole::Building => 0xb1,
    };
    let mut rng = ChaCha8Rng::from_seed(seed);
    let draws: Vec<f64> = labels
        .iter()
        .map(|_| -(1.0 - rng.gen::<f64>()).ln())
        .collect();
    let total: f64 = draws.iter().sum();
    labels.into_iter().zip(draws.into_iter().map(|d| d / total)).collect()
}

impl ClassifierBackend for StubBackend {
    fn classify_raw(&self, role: ModelRole, images: &[ImageRef]) -> Result<Vec<RawScores>, GatewayError> {
        Ok(images.iter().map(|img| self.scores_for(role, img)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{top1, Gateway};

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> ImageRef {
        let path = dir.join(name);
        fs::write(&path, bytes).unwrap();
        ImageRef {
            id: name.to_string(),
            path,
        }
    }

    #[test]
    fn sidecar_beside_image_wins() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(dir.path(), "x.png", b"pixels");
        fs::write(dir.path().join("x.png.labels.json"), r#"{"house": 1.0}"#).unwrap();
        let gw = Gateway::new(Box::new(StubBackend::default()));
        let out = gw.classify_batch(std::slice::from_ref(&img), ModelRole::Building).unwrap();
        assert_eq!(top1(out[0].as_ref().unwrap()), ("house", 1.0));
        // flat files answer both roles
        let out = gw.classify_batch(&[img], ModelRole::Scene).unwrap();
        assert_eq!(top1(out[0].as_ref().unwrap()), ("house", 1.0));
    }

    #[test]
    fn content_hash_sidecar_with_roles() {
        let dir = tempfile::tempdir().unwrap();
        let labels = tempfile::tempdir().unwrap();
        let img = write(dir.path(), "y.png", b"other pixels");
        let digest = hex::encode(Sha256::digest(b"other pixels"));
        fs::write(
            labels.path().join(format!("{digest}.labels.json")),
            r#"{"scene": {"restaurant": 1.0}, "building": {"retail": 0.7, "office_building": 0.3}}"#,
        )
        .unwrap();
        let gw = Gateway::new(Box::new(StubBackend::new(Some(labels.path().to_path_buf()))));
        let scene = gw.classify_batch(std::slice::from_ref(&img), ModelRole::Scene).unwrap();
        assert_eq!(top1(scene[0].as_ref().unwrap()).0, "restaurant");
        let building = gw.classify_batch(&[img], ModelRole::Building).unwrap();
        assert_eq!(top1(building[0].as_ref().unwrap()), ("retail", 0.7));
    }

    #[test]
    fn seeded_fallback_is_deterministic_and_valid() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.png", b"same bytes");
        let b = write(dir.path(), "b.png", b"same bytes");
        let c = write(dir.path(), "c.png", b"different");
        let gw = Gateway::new(Box::new(StubBackend::default()));
        for role in [ModelRole::Scene, ModelRole::Building] {
            let out = gw.classify_batch(&[a.clone(), b.clone(), c.clone()], role).unwrap();
            let da = out[0].as_ref().unwrap();
            assert_eq!(da, out[1].as_ref().unwrap());
            assert_ne!(da, out[2].as_ref().unwrap());
            assert!((da.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn bad_sidecar_marks_item_invalid() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(dir.path(), "z.png", b"z");
        fs::write(dir.path().join("z.png.labels.json"), r#"{"house": 0.8}"#).unwrap();
        let gw = Gateway::new(Box::new(StubBackend::default()));
        let out = gw.classify_batch(&[img], ModelRole::Building).unwrap();
        assert!(out[0].is_err());
    }

    #[test]
    fn missing_image_marks_item_invalid() {
        let gw = Gateway::new(Box::new(StubBackend::default()));
        let out = gw
            .classify_batch(
                &[ImageRef {
                    id: "gone".into(),
                    path: PathBuf::from("/nonexistent/gone.png"),
                }],
                ModelRole::Scene,
            )
            .unwrap();
        assert!(out[0].as_ref().unwrap_err().reason.contains("unreadable"));
    }
}
