//! Synthetic base/new benchmark.
//!
//! Every class has a latent `z ~ N(0, I)`. Its class token is `A z` plus a
//! little noise and its image prototype is `B z`; images are patch sets
//! scattered around the prototype. `A` and `B` are drawn correlated
//! (`B = sqrt(1 - rho^2) A + rho G`) so the two modalities start roughly
//! aligned, the way a pretrained dual encoder would.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rng::{derive_seed, SeededRng};

/// Noise on the class tokens around `A z`.
pub const TOKEN_NOISE: f64 = 0.1;
/// Number of leading values covered by the dataset checksum.
pub const CHECKSUM_VALUES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_classes: usize,
    pub shots: usize,
    pub test_per_class: usize,
    /// Latent width.
    pub d_z: usize,
    /// Patch rows per image.
    pub n_patches: usize,
    /// Patch noise.
    pub sigma: f64,
    /// Scale of the latent-to-token maps; entries are `N(0, scale^2 / d_z)`.
    pub token_scale: f64,
    /// Share of the image map drawn independently of the token map.
    pub prototype_noise: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_classes: 128,
            shots: 16,
            test_per_class: 20,
            d_z: 4,
            n_patches: 4,
            sigma: 0.6,
            token_scale: 3.0,
            prototype_noise: 0.0,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 4 {
            return Err(Error::TooFewClasses(self.n_classes));
        }
        if self.shots == 0 || self.test_per_class == 0 || self.n_patches == 0 || self.d_z == 0 {
            return Err(Error::Config(
                "data.shots, test_per_class, n_patches and d_z must be positive".into(),
            ));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "data.sigma {} must be >= 0",
                self.sigma
            )));
        }
        if !(self.token_scale > 0.0 && self.token_scale.is_finite()) {
            return Err(Error::Config(format!(
                "data.token_scale {} must be > 0",
                self.token_scale
            )));
        }
        if !(0.0..=1.0).contains(&self.prototype_noise) {
            return Err(Error::Config(format!(
                "data.prototype_noise {} outside [0, 1]",
                self.prototype_noise
            )));
        }
        Ok(())
    }

    pub fn n_base(&self) -> usize {
        self.n_classes.div_ceil(2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Base,
    New,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Base => "base",
            Split::New => "new",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub label: usize,
    pub patches: Matrix,
    /// Column sums of `patches`, what the mean-pooling encoder consumes.
    pub patch_sum: Vec<f64>,
}

impl Image {
    fn new(label: usize, patches: Matrix) -> Self {
        let patch_sum = patches.sum_rows().into_data();
        Self {
            label,
            patches,
            patch_sum,
        }
    }
}

/// A few-shot training image: class id and index into that class's pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ImageRef {
    pub class: usize,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    config: DataConfig,
    d_e: usize,
    latents: Matrix,
    class_tokens: Matrix,
    prototypes: Matrix,
    train: Vec<Vec<Image>>,
    test: Vec<Vec<Image>>,
    base_ids: Vec<usize>,
    new_ids: Vec<usize>,
}

/// Few-shot training pairs over the base classes.
#[derive(Clone, Debug, PartialEq)]
pub struct FewShotSplit {
    pub shots: usize,
    pub pairs: Vec<ImageRef>,
}

fn image_batch(
    rng: &mut SeededRng,
    label: usize,
    count: usize,
    prototype: &[f64],
    n_patches: usize,
    sigma: f64,
) -> Result<Vec<Image>> {
    (0..count)
        .map(|_| {
            let mut patches = Matrix::zeros(n_patches, prototype.len());
            for r in 0..n_patches {
                for (v, &m) in patches.row_mut(r).iter_mut().zip(prototype) {
                    *v = m + sigma * rng.gaussian();
                }
            }
            Ok(Image::new(label, patches))
        })
        .collect()
}

impl SyntheticDataset {
    pub fn generate(config: &DataConfig, d_e: usize) -> Result<Self> {
        config.validate()?;
        if d_e == 0 {
            return Err(Error::Config("token width must be positive".into()));
        }
        let seed = config.seed;
        let n = config.n_classes;
        let map_std = config.token_scale / (config.d_z as f64).sqrt();
        let latents = SeededRng::stream(seed, "latents").gaussian_matrix(n, config.d_z, 1.0);
        let mut maps = SeededRng::stream(seed, "maps");
        let token_map = maps.gaussian_matrix(d_e, config.d_z, map_std);
        let rho = config.prototype_noise;
        let image_map = token_map
            .scale((1.0 - rho * rho).sqrt())
            .add(&maps.gaussian_matrix(d_e, config.d_z, map_std).scale(rho))?;
        let noise = SeededRng::stream(seed, "token-noise").gaussian_matrix(n, d_e, TOKEN_NOISE);
        let class_tokens = latents.matmul_t(&token_map)?.add(&noise)?;
        let prototypes = latents.matmul_t(&image_map)?;

        let mut order: Vec<usize> = (0..n).collect();
        SeededRng::stream(seed, "split").shuffle(&mut order);
        let (base, new) = order.split_at(config.n_base());
        let mut base_ids = base.to_vec();
        let mut new_ids = new.to_vec();
        base_ids.sort_unstable();
        new_ids.sort_unstable();

        let mut train = Vec::with_capacity(n);
        let mut test = Vec::with_capacity(n);
        for class in 0..n {
            let proto = prototypes.row(class);
            let mut rng = SeededRng::new(derive_seed(seed, &format!("images-{class}")));
            train.push(image_batch(
                &mut rng,
                class,
                config.shots,
                proto,
                config.n_patches,
                config.sigma,
            )?);
            test.push(image_batch(
                &mut rng,
                class,
                config.test_per_class,
                proto,
                config.n_patches,
                config.sigma,
            )?);
        }
        Ok(Self {
            config: config.clone(),
            d_e,
            latents,
            class_tokens,
            prototypes,
            train,
            test,
            base_ids,
            new_ids,
        })
    }

    pub fn config(&self) -> &DataConfig {
        &self.config
    }

    pub fn d_e(&self) -> usize {
        self.d_e
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    pub fn latents(&self) -> &Matrix {
        &self.latents
    }

    pub fn class_tokens(&self) -> &Matrix {
        &self.class_tokens
    }

    pub fn prototypes(&self) -> &Matrix {
        &self.prototypes
    }

    pub fn base_ids(&self) -> &[usize] {
        &self.base_ids
    }

    pub fn new_ids(&self) -> &[usize] {
        &self.new_ids
    }

    pub fn split_ids(&self, split: Split) -> &[usize] {
        match split {
            Split::Base => &self.base_ids,
            Split::New => &self.new_ids,
        }
    }

    /// Class tokens of a split, one row per id in [`Self::split_ids`] order.
    pub fn split_tokens(&self, split: Split) -> Matrix {
        self.class_tokens.select_rows(self.split_ids(split))
    }

    pub fn is_base(&self, class: usize) -> bool {
        self.base_ids.binary_search(&class).is_ok()
    }

    /// Position of `class` within the base split.
    pub fn base_index(&self, class: usize) -> Option<usize> {
        self.base_ids.binary_search(&class).ok()
    }

    pub fn train_images(&self, class: usize) -> &[Image] {
        &self.train[class]
    }

    pub fn test_images(&self, class: usize) -> &[Image] {
        &self.test[class]
    }

    pub fn image(&self, r: ImageRef) -> &Image {
        &self.train[r.class][r.index]
    }

    /// Test images of a split, class by class in split order.
    pub fn split_test_images(&self, split: Split) -> impl Iterator<Item = &Image> {
        self.split_ids(split)
            .iter()
            .flat_map(|&c| self.test[c].iter())
    }

    pub fn few_shot_split(&self) -> FewShotSplit {
        let pairs = self
            .base_ids
            .iter()
            .flat_map(|&class| (0..self.config.shots).map(move |index| ImageRef { class, index }))
            .collect();
        FewShotSplit {
            shots: self.config.shots,
            pairs,
        }
    }

    /// sha256 over the little-endian bytes of the first 100 values of
    /// latents followed by class tokens.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        self.latents
            .data()
            .iter()
            .chain(self.class_tokens.data())
            .take(CHECKSUM_VALUES)
            .for_each(|v| h.update(v.to_le_bytes()));
        hex(&h.finalize())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// On-disk dataset: generator parameters and a checksum. Loading
/// regenerates the data and checks it against the checksum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    pub d_e: usize,
    pub checksum: String,
    pub generator: DataConfig,
}

impl DatasetFile {
    pub fn describe(dataset: &SyntheticDataset) -> Self {
        Self {
            d_e: dataset.d_e,
            checksum: dataset.checksum(),
            generator: dataset.config.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SyntheticDataset> {
        let text = std::fs::read_to_string(path)?;
        let file: DatasetFile = toml::from_str(&text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let dataset = SyntheticDataset::generate(&file.generator, file.d_e)?;
        if dataset.checksum() != file.checksum {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: format!(
                    "checksum mismatch: file has {}, regenerated data gives {}",
                    file.checksum,
                    dataset.checksum()
                ),
            });
        }
        Ok(dataset)
    }
}

/// Checks that `b` ground truths with `k` candidates each fit strictly
/// inside the base classes: `b * k <= n_base - 1`.
pub fn validate_batch_config(n_base: usize, batch: usize, k: usize) -> Result<()> {
    if batch == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if k < 2 {
        return Err(Error::Config(format!("top-k must be at least 2, got {k}")));
    }
    let limit = n_base.saturating_sub(1);
    if batch * k <= limit {
        return Ok(());
    }
    Err(Error::BatchExceedsBaseClasses {
        n_base,
        batch,
        k,
        suggested_k: limit / batch,
    })
}
