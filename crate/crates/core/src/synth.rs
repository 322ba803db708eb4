//! Synthetic anisotropic "head CT" volumes with hyperintense ellipsoidal lesions.
//!
//! Volumes are generated already skull-stripped: an ellipsoidal brain of
//! tissue intensities on a zero background, plus additive Gaussian noise.
//! Positive volumes carry lesions whose total rasterized volume strictly
//! exceeds a threshold; negative volumes carry none.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MilError, Result};
use crate::mil::{Bag, Label};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub slices_min: usize,
    pub slices_max: usize,
    /// Height and width of every generated slice, in voxels.
    pub in_plane: usize,
    /// `(dz, dy, dx)` in millimetres.
    pub voxel_size: [f64; 3],
    pub tissue_mean: f64,
    pub tissue_sd: f64,
    pub lesion_mean: f64,
    pub lesion_sd: f64,
    pub noise_sd: f64,
    /// Positive-class threshold as a fraction of the volume's brain voxels.
    pub threshold_fraction: f64,
    /// In-plane lesion semi-axis range, millimetres.
    pub lesion_radius_mm: [f64; 2],
    /// Through-plane lesion semi-axis range, millimetres.
    pub lesion_depth_mm: [f64; 2],
    pub max_lesions: usize,
    /// Confine all lesions of a volume to a single slice.
    pub single_slice_lesions: bool,
    /// Upper bound on small hyperintense non-lesion specks at the brain rim, drawn
    /// uniformly in `0..=max_distractors` for every volume of either class.
    pub max_distractors: usize,
    /// In-plane semi-axis range of rim specks, millimetres.
    pub distractor_radius_mm: [f64; 2],
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            slices_min: 24,
            slices_max: 32,
            in_plane: 64,
            voxel_size: [5.0, 0.5, 0.5],
            tissue_mean: 30.0,
            tissue_sd: 5.0,
            lesion_mean: 70.0,
            lesion_sd: 5.0,
            noise_sd: 5.0,
            threshold_fraction: 0.015,
            lesion_radius_mm: [3.0, 6.0],
            lesion_depth_mm: [4.0, 10.0],
            max_lesions: 4,
            single_slice_lesions: false,
            max_distractors: 0,
            distractor_radius_mm: [0.5, 1.0],
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(MilError::Config(m.to_string()));
        if self.slices_min < 8 || self.slices_max < self.slices_min {
            return fail("need 8 <= slices_min <= slices_max");
        }
        if self.in_plane < 8 {
            return fail("in_plane must be at least 8");
        }
        let [dz, dy, dx] = self.voxel_size;
        if !(dz > 0.0 && dy > 0.0 && dx > 0.0) {
            return fail("voxel sizes must be positive");
        }
        if dz / dx < 5.0 || dz / dy < 5.0 {
            return fail("through-plane spacing must be at least 5x the in-plane spacing");
        }
        if !(self.lesion_mean > self.tissue_mean) {
            return fail("lesions must be hyperintense (lesion_mean > tissue_mean)");
        }
        if self.tissue_sd < 0.0 || self.lesion_sd < 0.0 || self.noise_sd < 0.0 {
            return fail("standard deviations must be non-negative");
        }
        if !(self.threshold_fraction > 0.0 && self.threshold_fraction < 1.0) {
            return fail("threshold_fraction must lie in (0, 1)");
        }
        let ok_range = |r: [f64; 2]| r[0] > 0.0 && r[1] >= r[0];
        if !ok_range(self.lesion_radius_mm)
            || !ok_range(self.lesion_depth_mm)
            || !ok_range(self.distractor_radius_mm)
        {
            return fail("lesion size ranges must be positive and ordered");
        }
        if self.max_lesions == 0 {
            return fail("max_lesions must be at least 1");
        }
        Ok(())
    }

    pub fn voxel_volume(&self) -> f64 {
        self.voxel_size.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    /// `(z, y, x)` in millimetres from the volume corner.
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    pub mean_intensity: f64,
}

impl Lesion {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.semi_axes[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

/// One generated volume, `slices x height x width`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub grid: Vec<f64>,
    pub brain_mask: Vec<bool>,
    pub lesion_mask: Vec<bool>,
    pub lesions: Vec<Lesion>,
    /// Rim specks: hyperintense like blood but never counted as lesion.
    pub distractors: Vec<Lesion>,
    /// Threshold in cubic millimetres used to label this volume.
    pub threshold: f64,
    pub label: Label,
}

impl Volume {
    pub fn voxel_volume(&self) -> f64 {
        self.voxel_size.iter().product()
    }

    pub fn lesion_voxels(&self) -> usize {
        self.lesion_mask.iter().filter(|&&m| m).count()
    }

    pub fn brain_voxels(&self) -> usize {
        self.brain_mask.iter().filter(|&&m| m).count()
    }

    pub fn slice(&self, z: usize) -> &[f64] {
        let n = self.dims[1] * self.dims[2];
        &self.grid[z * n..(z + 1) * n]
    }

    /// Whether slice `z` contains any rasterized lesion voxel.
    pub fn slice_has_lesion(&self, z: usize) -> bool {
        let n = self.dims[1] * self.dims[2];
        self.lesion_mask[z * n..(z + 1) * n].iter().any(|&m| m)
    }
}

fn voxel_center(idx: usize, spacing: f64) -> f64 {
    (idx as f64 + 0.5) * spacing
}

/// Rasterizes `lesions` onto a `dims` grid: a voxel belongs to a lesion when its centre does.
pub fn rasterize(lesions: &[Lesion], dims: [usize; 3], voxel_size: [f64; 3]) -> Vec<bool> {
    let [nz, ny, nx] = dims;
    let mut mask = vec![false; nz * ny * nx];
    for lesion in lesions {
        // bounding box in voxel indices
        let range = |axis: usize, n: usize| {
            let lo = ((lesion.center[axis] - lesion.semi_axes[axis]) / voxel_size[axis] - 0.5).floor();
            let hi = ((lesion.center[axis] + lesion.semi_axes[axis]) / voxel_size[axis] - 0.5).ceil();
            (lo.max(0.0) as usize, (hi.max(-1.0) + 1.0).min(n as f64) as usize)
        };
        let (z0, z1) = range(0, nz);
        let (y0, y1) = range(1, ny);
        let (x0, x1) = range(2, nx);
        for z in z0..z1 {
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = [
                        voxel_center(z, voxel_size[0]),
                        voxel_center(y, voxel_size[1]),
                        voxel_center(x, voxel_size[2]),
                    ];
                    if lesion.contains(p) {
                        mask[(z * ny + y) * nx + x] = true;
                    }
                }
            }
        }
    }
    mask
}

/// Positive iff the rasterized lesion volume (mm^3) strictly exceeds `threshold`.
pub fn label_volume(volume: &Volume, threshold: f64) -> Label {
    let lesion_mm3 = volume.lesion_voxels() as f64 * volume.voxel_volume();
    Label::from_bool(lesion_mm3 > threshold)
}

fn brain_mask(dims: [usize; 3], voxel_size: [f64; 3]) -> (Vec<bool>, [f64; 3], [f64; 3]) {
    let [nz, ny, nx] = dims;
    let extent = [nz as f64 * voxel_size[0], ny as f64 * voxel_size[1], nx as f64 * voxel_size[2]];
    let center = extent.map(|e| e / 2.0);
    let semi = [0.6 * extent[0], 0.42 * extent[1], 0.36 * extent[2]];
    let brain = Lesion {
        center,
        semi_axes: semi,
        mean_intensity: 0.0,
    };
    (rasterize(std::slice::from_ref(&brain), dims, voxel_size), center, semi)
}

const PLACEMENT_ATTEMPTS: usize = 200;

/// Generates one volume. Deterministic in `(config, make_positive, seed)`.
pub fn generate_volume(config: &GenConfig, make_positive: bool, seed: u64) -> Result<Volume> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nz = rng.gen_range(config.slices_min..=config.slices_max);
    let dims = [nz, config.in_plane, config.in_plane];
    let vs = config.voxel_size;
    let (brain, brain_center, brain_semi) = brain_mask(dims, vs);
    let brain_voxels = brain.iter().filter(|&&b| b).count();
    let threshold = config.threshold_fraction * brain_voxels as f64 * config.voxel_volume();

    let mut lesions = Vec::new();
    let mut lesion_mask = vec![false; brain.len()];
    if make_positive {
        let lesion_slice = rng.gen_range(nz / 4..nz - nz / 4);
        let mut attempts = 0;
        while (lesion_mask.iter().filter(|&&m| m).count() as f64 * config.voxel_volume()) <= threshold {
            if attempts == PLACEMENT_ATTEMPTS {
                return Err(MilError::Config(format!(
                    "cannot place up to {} lesions above the {threshold:.1} mm^3 threshold inside the brain",
                    config.max_lesions
                )));
            }
            if lesions.len() == config.max_lesions {
                // this draw cannot reach the threshold; start the lesion set over
                lesions.clear();
                lesion_mask.fill(false);
            }
            attempts += 1;
            let r = rng.gen_range(config.lesion_radius_mm[0]..=config.lesion_radius_mm[1]);
            let stretch = rng.gen_range(0.8..1.25);
            let (cz, depth) = if config.single_slice_lesions {
                (voxel_center(lesion_slice, vs[0]), 0.45 * vs[0])
            } else {
                let d = rng.gen_range(config.lesion_depth_mm[0]..=config.lesion_depth_mm[1]);
                let zr = brain_semi[0] * 0.6;
                (brain_center[0] + rng.gen_range(-zr..=zr), d)
            };
            let yr = brain_semi[1] * 0.8;
            let xr = brain_semi[2] * 0.8;
            let candidate = Lesion {
                center: [
                    cz,
                    brain_center[1] + rng.gen_range(-yr..=yr),
                    brain_center[2] + rng.gen_range(-xr..=xr),
                ],
                semi_axes: [depth, r * stretch, r / stretch],
                mean_intensity: config.lesion_mean,
            };
            let raster = rasterize(std::slice::from_ref(&candidate), dims, vs);
            let inside = raster.iter().zip(&brain).all(|(&l, &b)| !l || b);
            let nonempty = raster.iter().any(|&l| l);
            if !(inside && nonempty) {
                continue;
            }
            for (m, l) in lesion_mask.iter_mut().zip(raster) {
                *m |= l;
            }
            lesions.push(candidate);
        }
    }

    let n_distractors = rng.gen_range(0..=config.max_distractors);
    let distractors: Vec<Lesion> = (0..n_distractors)
        .map(|_| {
            let z = rng.gen_range(0..nz);
            let cz = voxel_center(z, vs[0]);
            let shrink = (1.0 - ((cz - brain_center[0]) / brain_semi[0]).powi(2)).max(0.0).sqrt();
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = rng.gen_range(config.distractor_radius_mm[0]..=config.distractor_radius_mm[1]);
            Lesion {
                center: [
                    cz,
                    brain_center[1] + 0.95 * shrink * brain_semi[1] * theta.sin(),
                    brain_center[2] + 0.95 * shrink * brain_semi[2] * theta.cos(),
                ],
                semi_axes: [0.45 * vs[0], r, r],
                mean_intensity: config.lesion_mean,
            }
        })
        .collect();
    let distractor_mask = rasterize(&distractors, dims, vs);

    let tissue = Normal::new(config.tissue_mean, config.tissue_sd).expect("validated sd");
    let blood = Normal::new(config.lesion_mean, config.lesion_sd).expect("validated sd");
    let noise = Normal::new(0.0, config.noise_sd).expect("validated sd");
    let grid = brain
        .iter()
        .zip(&lesion_mask)
        .zip(&distractor_mask)
        .map(|((&b, &l), &d)| {
            let base = if l || d {
                blood.sample(&mut rng)
            } else if b {
                tissue.sample(&mut rng)
            } else {
                0.0
            };
            base + noise.sample(&mut rng)
        })
        .collect();

    let mut volume = Volume {
        dims,
        voxel_size: vs,
        grid,
        brain_mask: brain,
        lesion_mask,
        lesions,
        distractors,
        threshold,
        label: Label::Negative,
    };
    volume.label = label_volume(&volume, threshold);
    debug_assert_eq!(volume.label.is_positive(), make_positive);
    Ok(volume)
}

/// Centre-crops or zero-pads a `height x width` slice to `target`, per axis.
pub fn center_pad_crop(slice: &[f64], height: usize, width: usize, target: (usize, usize)) -> Vec<f64> {
    let (th, tw) = target;
    let mut out = vec![0.0; th * tw];
    // (source start, destination start, length) along one axis
    let axis = |n: usize, t: usize| {
        if n >= t {
            ((n - t) / 2, 0, t)
        } else {
            (0, (t - n) / 2, n)
        }
    };
    let (sy, dy, ly) = axis(height, th);
    let (sx, dx, lx) = axis(width, tw);
    for r in 0..ly {
        let src = &slice[(sy + r) * width + sx..(sy + r) * width + sx + lx];
        out[(dy + r) * tw + dx..(dy + r) * tw + dx + lx].copy_from_slice(src);
    }
    out
}

/// One instance per axial slice, padded or cropped to `target`.
pub fn slice_to_bag(volume: &Volume, id: impl Into<String>, target: (usize, usize)) -> Result<Bag> {
    if target.0 == 0 || target.1 == 0 {
        return Err(MilError::Config("target slice size must be positive".into()));
    }
    let [nz, ny, nx] = volume.dims;
    let instances = (0..nz)
        .map(|z| {
            let data = center_pad_crop(volume.slice(z), ny, nx, target);
            Tensor::new(vec![1, target.0, target.1], data)
        })
        .collect::<Result<Vec<_>>>()?;
    let truth = (0..nz).map(|z| volume.slice_has_lesion(z)).collect();
    Bag::new(id, volume.label, instances, Some(truth))
}

/// Split sizes for [`build_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub positive_fraction_test: f64,
}

impl Default for SplitSizes {
    fn default() -> Self {
        // Table-1 proportions (672 / 168 / 4042, 2.6% positive test) at desk scale
        Self {
            n_train: 400,
            n_val: 100,
            n_test: 600,
            positive_fraction_test: 0.026,
        }
    }
}

impl SplitSizes {
    pub fn test_positives(&self) -> usize {
        (self.n_test as f64 * self.positive_fraction_test).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(MilError::Config("split sizes must be positive".into()));
        }
        if self.n_train % 2 != 0 || self.n_val % 2 != 0 {
            return Err(MilError::Config(
                "train and validation sizes must be even to be class-balanced".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction_test) {
            return Err(MilError::Config("positive_fraction_test must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Bag>,
    pub val: Vec<Bag>,
    pub test: Vec<Bag>,
}

/// Seed of the `index`-th volume drawn from `master` (SplitMix64 finalizer).
pub fn volume_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates `labels.len()` bags starting at global volume index `first`.
pub fn generate_bags(config: &GenConfig, labels: &[Label], first: usize, seed: u64) -> Result<Vec<Bag>> {
    let target = (config.in_plane, config.in_plane);
    labels
        .iter()
        .enumerate()
        .map(|(i, label)| {
            let index = first + i;
            let volume = generate_volume(config, label.is_positive(), volume_seed(seed, index as u64))?;
            slice_to_bag(&volume, format!("vol-{index:06}"), target)
        })
        .collect()
}

fn balanced_labels(n: usize) -> Vec<Label> {
    (0..n).map(|i| Label::from_bool(i % 2 == 0)).collect()
}

/// Balanced train and validation splits and an imbalanced test split.
///
/// Every volume has a unique id, so the splits are disjoint.
pub fn build_dataset(config: &GenConfig, sizes: &SplitSizes, seed: u64) -> Result<Dataset> {
    config.validate()?;
    sizes.validate()?;
    let test_pos = sizes.test_positives();
    let mut test_labels = vec![Label::Negative; sizes.n_test];
    test_labels[..test_pos].fill(Label::Positive);
    // interleave positives through the test split deterministically
    let mut rng = ChaCha8Rng::seed_from_u64(volume_seed(seed, u64::MAX));
    rand::seq::SliceRandom::shuffle(test_labels.as_mut_slice(), &mut rng);

    let train = generate_bags(config, &balanced_labels(sizes.n_train), 0, seed)?;
    let val = generate_bags(config, &balanced_labels(sizes.n_val), sizes.n_train, seed)?;
    let test = generate_bags(config, &test_labels, sizes.n_train + sizes.n_val, seed)?;
    Ok(Dataset { train, val, test })
}
