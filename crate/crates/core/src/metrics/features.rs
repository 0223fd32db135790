//! Image embedders for distribution metrics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::GrayImage;
use crate::error::{Error, Result};
use crate::nn::read_blob;
use crate::tensor::Tensor;

/// Row-major `N × d` embedding matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
    pub extractor: String,
    pub source_hash: Option<String>,
}

impl FeatureSet {
    pub fn new(n: usize, d: usize, data: Vec<f64>, extractor: &str) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::shape(&[n, d], &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { message: "non-finite feature".into(), timestep: None });
        }
        Ok(Self { n, d, data, extractor: extractor.to_string(), source_hash: None })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.d)
    }

    /// Subset by row indices, in the given order.
    pub fn select(&self, idx: &[usize]) -> FeatureSet {
        let data = idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        FeatureSet { n: idx.len(), d: self.d, data, extractor: self.extractor.clone(), source_hash: self.source_hash.clone() }
    }
}

pub trait FeatureExtractor {
    fn id(&self) -> String;
    fn embed(&self, image: &GrayImage) -> Result<Vec<f64>>;
    fn dim(&self) -> usize;
}

/// Row `i` of the result embeds `images[i]`.
pub fn extract_features(images: &[GrayImage], extractor: &dyn FeatureExtractor) -> Result<FeatureSet> {
    let mut data = Vec::with_capacity(images.len() * extractor.dim());
    for img in images {
        data.extend(extractor.embed(img)?);
    }
    FeatureSet::new(images.len(), extractor.dim(), data, &extractor.id())
}

/// Linear embedder `W · flatten(resize(x))` with `W` drawn as N(0, 1/P).
#[derive(Debug, Clone)]
pub struct LinearEmbedder {
    id: String,
    side: usize,
    weight: Tensor,
    bias: Option<Tensor>,
}

impl LinearEmbedder {
    /// Seeded random projection, the asset-free test embedder.
    pub fn random_projection(seed: u64, side: usize, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = side * side;
        let weight = Tensor::randn(&[dim, p], &mut rng).scale(1.0 / (p as f64).sqrt());
        Self { id: format!("random-projection:{seed}:{side}:{dim}"), side, weight, bias: None }
    }

    /// Loads `weight [d, s²]` and optional `bias [d]` from a parameter blob.
    pub fn from_asset(name: &str, path: &Path) -> Result<Self> {
        let mut weight = None;
        let mut bias = None;
        for (n, t) in read_blob(path)? {
            match n.as_str() {
                "weight" => weight = Some(t),
                "bias" => bias = Some(t),
                other => return Err(Error::Integrity(format!("embedder asset has unknown entry `{other}`"))),
            }
        }
        let weight = weight.ok_or_else(|| Error::Integrity(format!("{}: no `weight` entry", path.display())))?;
        let [d, p] = weight.shape() else {
            return Err(Error::shape(&[0, 0], weight.shape()));
        };
        let side = (*p as f64).sqrt().round() as usize;
        if side * side != *p {
            return Err(Error::Integrity(format!("embedder input width {p} is not a square")));
        }
        if let Some(b) = &bias {
            if b.shape() != [*d] {
                return Err(Error::shape(&[*d], b.shape()));
            }
        }
        Ok(Self { id: format!("asset:{name}"), side, weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn side(&self) -> usize {
        self.side
    }
}

impl FeatureExtractor for LinearEmbedder {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn dim(&self) -> usize {
        self.weight.shape()[0]
    }

    fn embed(&self, image: &GrayImage) -> Result<Vec<f64>> {
        let x: Vec<f64> = image.resize_area(self.side, self.side).data.iter().map(|v| 2.0 * v - 1.0).collect();
        let p = x.len();
        let w = self.weight.data();
        Ok((0..self.dim())
            .map(|r| {
                let dot: f64 = w[r * p..(r + 1) * p].iter().zip(&x).map(|(a, b)| a * b).sum();
                dot + self.bias.as_ref().map_or(0.0, |b| b.data()[r])
            })
            .collect())
    }
}

/// Logical asset names mapped to local files.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetRegistry {
    pub assets: BTreeMap<String, PathBuf>,
}

impl AssetRegistry {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn get(&self, name: &str) -> Option<&Path> {
        self.assets.get(name).map(PathBuf::as_path)
    }
}

/// `random-projection[:seed[:side[:dim]]]`, or the name of a registered
/// embedder asset such as `inception-embedder`.
pub fn extractor_by_name(name: &str, assets: &AssetRegistry) -> Result<Box<dyn FeatureExtractor>> {
    if let Some(rest) = name.strip_prefix("random-projection") {
        let parts: Vec<&str> = rest.split(':').filter(|s| !s.is_empty()).collect();
        let num = |i: usize, default: u64| -> Result<u64> {
            parts.get(i).map_or(Ok(default), |s| {
                s.parse().map_err(|_| Error::config(format!("bad extractor parameter `{s}`")))
            })
        };
        return Ok(Box::new(LinearEmbedder::random_projection(
            num(0, 0)?,
            num(1, 16)? as usize,
            num(2, 32)? as usize,
        )));
    }
    match assets.get(name) {
        Some(path) => Ok(Box::new(LinearEmbedder::from_asset(name, path)?)),
        None => Err(Error::config(format!("extractor `{name}` is not registered"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_images() -> Vec<GrayImage> {
        vec![
            GrayImage::new(4, 4, (0..16).map(|i| i as f64 / 15.0).collect()).unwrap(),
            GrayImage::new(4, 4, vec![0.5; 16]).unwrap(),
        ]
    }

    #[test]
    fn projection_rows_match_explicit_products() {
        let e = LinearEmbedder::random_projection(11, 4, 3);
        let f = extract_features(&two_images(), &e).unwrap();
        assert_eq!((f.n, f.d), (2, 3));
        let w = e.weight().data();
        for (i, img) in two_images().iter().enumerate() {
            for r in 0..3 {
                let mut acc = 0.0;
                for k in 0..16 {
                    acc += w[r * 16 + k] * (2.0 * img.data[k] - 1.0);
                }
                assert!((f.row(i)[r] - acc).abs() < 1e-12);
            }
        }
        // the flat image is zero in model space
        assert!(f.row(1).iter().all(|v| v.abs() < 1e-15));
        let golden = [0.5490254340546606, 0.11094457856259296, -0.34528604114295713];
        for (a, b) in f.row(0).iter().zip(golden) {
            assert!((a - b).abs() < 1e-12, "{:?}", f.row(0));
        }
    }

    #[test]
    fn permutation_and_determinism() {
        let e = LinearEmbedder::random_projection(1, 4, 5);
        let imgs = two_images();
        let a = extract_features(&imgs, &e).unwrap();
        assert_eq!(a, extract_features(&imgs, &e).unwrap());
        let rev: Vec<GrayImage> = imgs.iter().rev().cloned().collect();
        let b = extract_features(&rev, &e).unwrap();
        assert_eq!(a.row(0), b.row(1));
        assert_eq!(a.row(1), b.row(0));
    }

    #[test]
    fn registry_lookup() {
        let reg = AssetRegistry::default();
        assert!(matches!(extractor_by_name("inception-embedder", &reg), Err(Error::Config(_))));
        assert_eq!(extractor_by_name("random-projection:3:8:4", &reg).unwrap().dim(), 4);
        let dir = tempfile::tempdir().unwrap();
        let mut store = crate::nn::ParamStore::new();
        store.insert("weight", Tensor::full(&[2, 9], 0.1)).unwrap();
        let p = dir.path().join("emb.bin");
        store.save_blob("", &p).unwrap();
        let mut reg = AssetRegistry::default();
        reg.assets.insert("inception-embedder".into(), p);
        let e = extractor_by_name("inception-embedder", &reg).unwrap();
        assert_eq!(e.dim(), 2);
        assert_eq!(e.id(), "asset:inception-embedder");
    }
}
