//! Sampling exocentric groups for each egocentric training image.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{substream, Stream};
use crate::tensor::{bilinear_resize, Tensor};

use super::manifest::{DatasetManifest, ImageEntry};
use super::store::DataStore;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Pairing {
    /// Exocentric images of any object with the same affordance.
    #[default]
    Affordance,
    /// Exocentric images of the same object.
    Object,
}

impl FromStr for Pairing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "affordance" => Ok(Pairing::Affordance),
            "object" => Ok(Pairing::Object),
            other => Err(Error::Config(format!("unknown pairing `{other}`, expected affordance or object"))),
        }
    }
}

/// Indices into `manifest.train`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupSpec {
    pub ego: usize,
    pub exo: Vec<usize>,
    pub affordance: usize,
    pub object: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleGroup {
    pub exo_images: Vec<Tensor>,
    pub ego_image: Tensor,
    pub affordance: usize,
    pub object: String,
}

fn pool_key(e: &ImageEntry, pairing: Pairing) -> (usize, Option<&str>) {
    match pairing {
        Pairing::Affordance => (e.affordance, None),
        Pairing::Object => (e.affordance, Some(e.object.as_str())),
    }
}

/// One group per egocentric training image, in shuffled order. Each group
/// draws `n` distinct exocentric images; `(seed, epoch)` fixes the result.
pub fn make_sample_groups(
    manifest: &DatasetManifest,
    n: usize,
    seed: u64,
    epoch: u64,
    pairing: Pairing,
) -> Result<Vec<GroupSpec>> {
    if n == 0 {
        return Err(Error::Config("group size N must be at least 1".into()));
    }
    let mut pools: BTreeMap<(usize, Option<&str>), Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.train_exo() {
        let key = pool_key(e, pairing);
        pools.entry(key).or_default().push(i);
    }
    let mut egos: Vec<usize> = manifest.train_ego().map(|(i, _)| i).collect();
    for &i in &egos {
        let e = &manifest.train[i];
        let key = pool_key(e, pairing);
        let have = pools.get(&key).map_or(0, Vec::len);
        if have < n {
            let class = manifest.affordance_name(e.affordance);
            let what = match key.1 {
                Some(obj) => format!("class `{class}` object `{obj}`"),
                None => format!("class `{class}`"),
            };
            return Err(Error::Config(format!(
                "{what} has {have} exocentric training images, groups need N = {n}"
            )));
        }
    }
    let mut rng = substream(seed, Stream::Sampler, epoch);
    egos.shuffle(&mut rng);
    Ok(egos
        .into_iter()
        .map(|i| {
            let e = &manifest.train[i];
            let key = pool_key(e, pairing);
            let pool = &pools[&key];
            let exo = index::sample(&mut rng, pool.len(), n).into_iter().map(|k| pool[k]).collect();
            GroupSpec {
                ego: i,
                exo,
                affordance: e.affordance,
                object: e.object.clone(),
            }
        })
        .collect())
}

/// Decoded training images, read once through the store.
#[derive(Debug, Default)]
pub struct ImageBank {
    images: HashMap<PathBuf, Tensor>,
}

impl ImageBank {
    pub fn load_train(store: &DataStore, manifest: &DatasetManifest) -> Result<Self> {
        let mut images = HashMap::new();
        for e in &manifest.train {
            if !images.contains_key(&e.image) {
                images.insert(e.image.clone(), store.read_image(&e.image)?);
            }
        }
        Ok(Self { images })
    }

    pub fn get(&self, path: &PathBuf) -> Result<&Tensor> {
        self.images
            .get(path)
            .ok_or_else(|| Error::data(path, None, "image not loaded"))
    }

    pub fn materialize(
        &self,
        manifest: &DatasetManifest,
        spec: &GroupSpec,
        mut augment: Option<&mut dyn FnMut(&Tensor) -> Result<Tensor>>,
    ) -> Result<SampleGroup> {
        let mut fetch = |i: usize| -> Result<Tensor> {
            let img = self.get(&manifest.train[i].image)?;
            match augment.as_mut() {
                Some(f) => f(img),
                None => Ok(img.clone()),
            }
        };
        let exo_images = spec.exo.iter().map(|&i| fetch(i)).collect::<Result<Vec<_>>>()?;
        let ego_image = fetch(spec.ego)?;
        Ok(SampleGroup {
            exo_images,
            ego_image,
            affordance: spec.affordance,
            object: spec.object.clone(),
        })
    }
}

/// Upscale by 9/8, take a random crop of the original size, flip
/// horizontally with probability 1/2.
pub fn augment_crop_flip<R: Rng>(img: &Tensor, rng: &mut R) -> Result<Tensor> {
    let [c, h, w] = img.dims()[..] else {
        return Err(Error::Shape(format!("augment expects c×h×w, got {:?}", img.dims())));
    };
    let (bh, bw) = (h + h / 8, w + w / 8);
    let oy = rng.gen_range(0..=bh - h);
    let ox = rng.gen_range(0..=bw - w);
    let flip = rng.gen_bool(0.5);
    let mut out = Vec::with_capacity(c * h * w);
    for plane in img.data().chunks_exact(h * w) {
        let big = bilinear_resize(&Tensor::new(vec![h, w], plane.to_vec())?, bh, bw)?;
        let b = big.data();
        for y in 0..h {
            let row = &b[(oy + y) * bw + ox..(oy + y) * bw + ox + w];
            if flip {
                out.extend(row.iter().rev());
            } else {
                out.extend_from_slice(row);
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Augmentation closure on its own substream, fresh per epoch.
pub fn epoch_augmenter(seed: u64, epoch: u64) -> impl FnMut(&Tensor) -> Result<Tensor> {
    let mut rng = substream(seed, Stream::Augment, epoch);
    move |img| augment_crop_flip(img, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::{SplitMode, View};
    use rand::SeedableRng;

    fn manifest(spec: &[(usize, &str, usize, usize)]) -> DatasetManifest {
        let mut train = Vec::new();
        for &(aff, obj, n_exo, n_ego) in spec {
            for (view, n) in [(View::Exo, n_exo), (View::Ego, n_ego)] {
                for k in 0..n {
                    train.push(ImageEntry {
                        view,
                        affordance: aff,
                        object: obj.into(),
                        image: PathBuf::from(format!("{obj}/{view:?}{k}.ppm")),
                        annotation: None,
                        points: None,
                    });
                }
            }
        }
        DatasetManifest {
            root: PathBuf::from("."),
            mode: SplitMode::Seen,
            seed: 0,
            affordances: vec!["cut".into(), "hold".into()],
            train,
            test: Vec::new(),
            warnings: Vec::new(),
        }
    }

    #[test]
    fn groups_share_affordance_and_are_reproducible() {
        let m = manifest(&[(0, "knife", 4, 3), (1, "cup", 2, 2), (1, "mug", 3, 1)]);
        for n in [1, 3] {
            let g = make_sample_groups(&m, n, 5, 0, Pairing::Affordance).unwrap();
            assert_eq!(g.len(), 6);
            for spec in &g {
                assert_eq!(spec.exo.len(), n);
                let mut uniq = spec.exo.clone();
                uniq.sort();
                uniq.dedup();
                assert_eq!(uniq.len(), n);
                assert!(spec.exo.iter().all(|&i| m.train[i].affordance == spec.affordance));
                assert_eq!(m.train[spec.ego].affordance, spec.affordance);
            }
            assert_eq!(g, make_sample_groups(&m, n, 5, 0, Pairing::Affordance).unwrap());
        }
        assert_ne!(
            make_sample_groups(&m, 3, 5, 0, Pairing::Affordance).unwrap(),
            make_sample_groups(&m, 3, 5, 1, Pairing::Affordance).unwrap()
        );
    }

    #[test]
    fn small_class_is_named() {
        let m = manifest(&[(0, "knife", 4, 1), (1, "cup", 2, 1)]);
        let err = make_sample_groups(&m, 3, 0, 0, Pairing::Affordance).unwrap_err();
        assert!(matches!(&err, Error::Config(msg) if msg.contains("`hold`")), "{err}");
        let m = manifest(&[(0, "knife", 4, 1), (0, "saw", 1, 1)]);
        assert!(make_sample_groups(&m, 2, 0, 0, Pairing::Affordance).is_ok());
        let err = make_sample_groups(&m, 2, 0, 0, Pairing::Object).unwrap_err();
        assert!(err.to_string().contains("`saw`"));
    }

    #[test]
    fn object_pairing_stays_within_object() {
        let m = manifest(&[(1, "cup", 3, 2), (1, "mug", 3, 2)]);
        for spec in make_sample_groups(&m, 2, 1, 0, Pairing::Object).unwrap() {
            assert!(spec.exo.iter().all(|&i| m.train[i].object == spec.object));
        }
    }

    #[test]
    fn augmentation_keeps_shape_and_range() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let img = Tensor::new(vec![3, 16, 16], (0..768).map(|i| (i % 17) as f64 / 16.0).collect()).unwrap();
        for _ in 0..10 {
            let out = augment_crop_flip(&img, &mut rng).unwrap();
            assert_eq!(out.dims(), &[3, 16, 16]);
            assert!(out.min() >= 0.0 && out.max() <= 1.0);
        }
        let flat = Tensor::full(&[3, 16, 16], 0.3);
        let out = augment_crop_flip(&flat, &mut rng).unwrap();
        assert!(out.max_abs_diff(&flat).unwrap() < 1e-12);
    }
}
