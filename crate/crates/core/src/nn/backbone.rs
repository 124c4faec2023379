use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linear::{normal_tensor, INIT_STD};
use super::{EncoderLayer, LinearLayer};
use crate::tensor::{ParamGroup, ParamId, ParamStore, Real, Tape, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl BackboneConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_features(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(TensorError::InvalidShape {
                context: "image extents must be divisible by the patch size",
                shape: vec![self.height, self.width, self.patch],
            });
        }
        if self.channels == 0 || self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(TensorError::InvalidShape {
                context: "channels and dim must be positive, dim divisible by heads",
                shape: vec![self.channels, self.dim, self.heads],
            });
        }
        Ok(())
    }
}

/// Non-overlapping patch projection plus learned positions and encoder layers.
#[derive(Clone, Debug)]
pub struct PatchBackbone {
    pub cfg: BackboneConfig,
    pub proj: LinearLayer,
    pub pos: ParamId,
    pub layers: Vec<EncoderLayer>,
}

/// Rearranges `[C, H, W]` into `[num_patches, C * p * p]` rows, patches in
/// row-major grid order, features ordered `(c, dy, dx)`.
pub fn extract_patches<T: Real>(image: &[T], cfg: &BackboneConfig) -> Result<Vec<T>, TensorError> {
    cfg.validate()?;
    let (c, h, w, p) = (cfg.channels, cfg.height, cfg.width, cfg.patch);
    if image.len() != c * h * w {
        return Err(TensorError::LengthMismatch {
            shape: vec![c, h, w],
            len: image.len(),
        });
    }
    let (gh, gw) = cfg.grid();
    let mut out = Vec::with_capacity(image.len());
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for dy in 0..p {
                    let row = (ch * h + py * p + dy) * w + px * p;
                    out.extend_from_slice(&image[row..row + p]);
                }
            }
        }
    }
    Ok(out)
}

impl PatchBackbone {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: BackboneConfig,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        cfg.validate()?;
        let group = ParamGroup::Backbone;
        let proj = LinearLayer::new(store, &format!("{name}.patch_proj"), cfg.patch_features(), cfg.dim, group, rng)?;
        let pos = store.register(
            format!("{name}.pos"),
            group,
            normal_tensor(&[cfg.num_patches(), cfg.dim], INIT_STD, rng),
        )?;
        let layers = (0..cfg.depth)
            .map(|i| {
                EncoderLayer::new(
                    store,
                    &format!("{name}.layer{i}"),
                    cfg.dim,
                    cfg.heads,
                    cfg.dim * cfg.mlp_ratio,
                    group,
                    rng,
                )
            })
            .collect::<Result<_, _>>()?;
        Ok(PatchBackbone { cfg, proj, pos, layers })
    }

    /// Pixel-embedding tokens `[num_patches, d]` of a `[C, H, W]` image.
    pub fn patch_embed<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, image: &[T]) -> Result<Var, TensorError> {
        let patches = extract_patches(image, &self.cfg)?;
        let x = tape.constant(&[self.cfg.num_patches(), self.cfg.patch_features()], patches)?;
        let x = self.proj.forward(tape, store, x)?;
        let pos = tape.param(store, self.pos);
        let mut x = tape.add(x, pos)?;
        for layer in &self.layers {
            x = layer.forward(tape, store, x)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(depth: usize) -> BackboneConfig {
        BackboneConfig {
            channels: 1,
            height: 8,
            width: 8,
            patch: 4,
            dim: 8,
            depth,
            heads: 2,
            mlp_ratio: 2,
        }
    }

    #[test]
    fn patch_order() {
        let image: Vec<f64> = (0..64).map(|v| v as f64).collect();
        let p = extract_patches(&image, &cfg(0)).unwrap();
        assert_eq!(&p[..4], &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(&p[4..8], &[8.0, 9.0, 10.0, 11.0]);
        // second patch starts at column 4
        assert_eq!(p[16], 4.0);
        // third patch starts at row 4
        assert_eq!(p[32], 32.0);
    }

    #[test]
    fn depth_zero_is_patch_projection_plus_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let bb = PatchBackbone::new(&mut store, "bb", cfg(0), &mut rng).unwrap();
        let image: Vec<f64> = (0..64).map(|v| (v as f64 * 0.37).sin()).collect();
        let mut tape = Tape::new();
        let y = bb.patch_embed(&mut tape, &store, &image).unwrap();
        assert_eq!(tape.shape(y), &[4, 8]);

        let patches = extract_patches(&image, &cfg(0)).unwrap();
        let w = store.get(bb.proj.weight).tensor.data();
        let b = store.get(bb.proj.bias).tensor.data();
        let pos = store.get(bb.pos).tensor.data();
        for t in 0..4 {
            for j in 0..8 {
                let mut acc = 0.0;
                for i in 0..16 {
                    acc += patches[t * 16 + i] * w[i * 8 + j];
                }
                let expected = acc + b[j] + pos[t * 8 + j];
                assert!((tape.value(y)[t * 8 + j] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_image_and_positions_give_zero_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let bb = PatchBackbone::new(&mut store, "bb", cfg(0), &mut rng).unwrap();
        store.get_mut(bb.pos).tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut tape = Tape::new();
        let y = bb.patch_embed(&mut tape, &store, &[0.0; 64]).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depth_two_snapshot() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f64>::new();
        let bb = PatchBackbone::new(&mut store, "bb", cfg(2), &mut rng).unwrap();
        let image: Vec<f64> = (0..64).map(|v| ((v * 13 % 17) as f64 - 8.0) / 8.0).collect();
        let mut tape = Tape::new();
        let y = bb.patch_embed(&mut tape, &store, &image).unwrap();
        let v = tape.value(y);
        let sum: f64 = v.iter().sum();
        let abs: f64 = v.iter().map(|x| x.abs()).sum();
        assert!((sum - SNAP_SUM).abs() < 1e-12, "{sum:e}");
        assert!((abs - SNAP_ABS).abs() < 1e-12, "{abs:e}");
    }

    const SNAP_SUM: f64 = 3.589531228114124e-1;
    const SNAP_ABS: f64 = 1.013761999335762e0;

    #[test]
    fn indivisible_extents_error() {
        let mut c = cfg(0);
        c.height = 10;
        assert!(c.validate().is_err());
        assert!(extract_patches(&[0.0f64; 80], &c).is_err());
    }
}
