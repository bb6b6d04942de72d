//! Synthetic feature-pair scenes with exact ground-truth flow.
//!
//! Each scene is a textured plane seen from two poses. Features are a
//! continuous per-channel sinusoid texture painted on the plane, except on a
//! random set of blocks where the plane carries a flat, slightly noisy value.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{project_point, reproject, Camera, PoseSE3};
use crate::error::{Error, Result};
use crate::tensor::{save_tensor, Tensor};

const TEXTURE_TERMS: usize = 4;
const AMBIGUOUS_NOISE: f64 = 0.01;
const MAX_RETRIES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Translation magnitude range in scene units; rotation is 0.1 rad per unit.
    pub motion_min: f64,
    pub motion_max: f64,
    /// Fraction of the source frame covered by flat, ambiguous blocks.
    pub ambiguous_fraction: f64,
    /// Largest allowed ground-truth displacement in pixels.
    pub max_flow: f64,
    pub depth_min: f64,
    pub depth_max: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 48,
            width: 64,
            channels: 32,
            motion_min: 0.05,
            motion_max: 0.2,
            ambiguous_fraction: 0.2,
            max_flow: 12.0,
            depth_min: 2.0,
            depth_max: 4.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return bad(format!(
                "scene grid must be non-empty, got {}x{}x{}",
                self.channels, self.height, self.width
            ));
        }
        if !(0.0 <= self.motion_min && self.motion_min <= self.motion_max) {
            return bad(format!(
                "motion range [{}, {}] is not an ordered non-negative interval",
                self.motion_min, self.motion_max
            ));
        }
        if !(0.0..=1.0).contains(&self.ambiguous_fraction) {
            return bad(format!("ambiguous_fraction {} outside [0, 1]", self.ambiguous_fraction));
        }
        if !(0.0 < self.depth_min && self.depth_min <= self.depth_max) {
            return bad(format!("depth range [{}, {}] invalid", self.depth_min, self.depth_max));
        }
        if !(self.max_flow > 0.0) {
            return bad(format!("max_flow must be positive, got {}", self.max_flow));
        }
        Ok(())
    }

    fn block_size(&self) -> usize {
        (self.height.min(self.width) / 6).max(2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub seed: u64,
    /// `C×H×W` source features.
    pub f_i: Tensor,
    /// `C×H×W` target features.
    pub f_j: Tensor,
    /// `H×W` inverse depth of the source frame.
    pub inv_depth: Tensor,
    pub pose: PoseSE3,
    pub camera: Camera,
    /// `2×H×W` ground-truth displacement, channel 0 = x.
    pub flow: Tensor,
    /// `H×W`; false where the source point falls behind the target camera.
    pub valid: Vec<bool>,
    /// `H×W`; true on flat, deliberately ambiguous blocks.
    pub ambiguous: Vec<bool>,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.inv_depth.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.inv_depth.shape()[1]
    }

    pub fn ambiguous_fraction(&self) -> f64 {
        self.ambiguous.iter().filter(|&&a| a).count() as f64 / self.ambiguous.len() as f64
    }

    /// Writes every array of the scene as tensor files under `dir`.
    pub fn export(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (h, w) = (self.height(), self.width());
        let mask = |m: &[bool]| Tensor::new(&[h, w], m.iter().map(|&b| b as u8 as f64).collect());
        save_tensor(&self.f_i, dir.join("f_i.lgut"))?;
        save_tensor(&self.f_j, dir.join("f_j.lgut"))?;
        save_tensor(&self.inv_depth, dir.join("inv_depth.lgut"))?;
        save_tensor(&self.flow, dir.join("flow.lgut"))?;
        save_tensor(&mask(&self.valid)?, dir.join("valid.lgut"))?;
        save_tensor(&mask(&self.ambiguous)?, dir.join("ambiguous.lgut"))?;
        let mut pose = self.pose.rotation().to_vec();
        pose.extend(self.pose.translation());
        save_tensor(&Tensor::new(&[7], pose)?, dir.join("pose.lgut"))?;
        let c = &self.camera;
        save_tensor(&Tensor::new(&[4], vec![c.fx, c.fy, c.cx, c.cy])?, dir.join("camera.lgut"))
    }
}

/// SplitMix64 finaliser over `global + (index+1)·φ`; the per-sample seed rule.
pub fn derive_seed(global: u64, index: u64) -> u64 {
    let mut z = global.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n` scenes with seeds `derive_seed(seed, k)`, generated in parallel.
pub fn generate_corpus(cfg: &SceneConfig, n: usize, seed: u64) -> Result<Vec<SceneSample>> {
    (0..n as u64)
        .into_par_iter()
        .map(|k| generate_scene(cfg, derive_seed(seed, k)))
        .collect()
}

struct Texture {
    // per channel, per term: (kx, ky, phase, amplitude)
    terms: Vec<[(f64, f64, f64, f64); TEXTURE_TERMS]>,
    flat: Vec<f64>,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng, channels: usize) -> Self {
        let amp = 1.0 / (TEXTURE_TERMS as f64).sqrt();
        let terms = (0..channels)
            .map(|_| {
                std::array::from_fn(|_| {
                    let omega = rng.random_range(0.3..1.2);
                    let theta = rng.random_range(0.0..PI);
                    let phase = rng.random_range(0.0..2.0 * PI);
                    (omega * theta.cos(), omega * theta.sin(), phase, amp)
                })
            })
            .collect();
        let flat = (0..channels).map(|_| rng.random_range(-0.5..0.5)).collect();
        Texture { terms, flat }
    }

    fn eval(&self, c: usize, x: f64, y: f64) -> f64 {
        self.terms[c]
            .iter()
            .map(|&(kx, ky, ph, a)| a * (kx * x + ky * y + ph).sin())
            .sum()
    }
}

/// Flat-block layout in source-frame pixel coordinates. Blocks inside the
/// frame are drawn without replacement to hit the requested fraction; blocks
/// outside it (seen only by the target frame) use a hashed coin.
struct Blocks {
    size: usize,
    ny: usize,
    nx: usize,
    inside: Vec<bool>,
    salt: u64,
    fraction: f64,
}

impl Blocks {
    fn new(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> Self {
        let size = cfg.block_size();
        let ny = cfg.height.div_ceil(size);
        let nx = cfg.width.div_ceil(size);
        let n = ny * nx;
        let want = (cfg.ambiguous_fraction * n as f64).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        for i in 0..want.min(n) {
            let j = rng.random_range(i..n);
            order.swap(i, j);
        }
        let mut inside = vec![false; n];
        for &b in &order[..want.min(n)] {
            inside[b] = true;
        }
        Blocks {
            size,
            ny,
            nx,
            inside,
            salt: rng.random(),
            fraction: cfg.ambiguous_fraction,
        }
    }

    fn flat_at(&self, x: f64, y: f64) -> bool {
        let bx = (x + 0.5).div_euclid(self.size as f64) as i64;
        let by = (y + 0.5).div_euclid(self.size as f64) as i64;
        if (0..self.nx as i64).contains(&bx) && (0..self.ny as i64).contains(&by) {
            return self.inside[by as usize * self.nx + bx as usize];
        }
        let h = derive_seed(self.salt, (by as u64).wrapping_mul(0x1_0000_0001) ^ bx as u64);
        ((h >> 11) as f64 / (1u64 << 53) as f64) < self.fraction
    }
}

/// Deterministic scene for `seed`.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<SceneSample> {
    cfg.validate()?;
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = Camera::for_grid(h, w);
    let texture = Texture::new(&mut rng, c);
    let blocks = Blocks::new(&mut rng, cfg);

    // inverse depth of a tilted plane is affine in normalised coordinates
    let d0 = 1.0 / rng.random_range(cfg.depth_min..=cfg.depth_max);
    let plane = [
        d0 * rng.random_range(-0.3..0.3),
        d0 * rng.random_range(-0.3..0.3),
        d0,
    ];
    let inv_depth = Tensor::from_fn(&[h, w], |p| {
        let a = ((p % w) as f64 - cam.cx) / cam.fx;
        let b = ((p / w) as f64 - cam.cy) / cam.fy;
        plane[0] * a + plane[1] * b + plane[2]
    });

    let mut magnitude = rng.random_range(cfg.motion_min..=cfg.motion_max);
    let dir: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
    let axis: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
    let spin: f64 = rng.random_range(-1.0..1.0);
    let dn = dir.iter().map(|v| v * v).sum::<f64>().sqrt();

    for _ in 0..MAX_RETRIES {
        let t = dir.map(|v| magnitude * v / dn);
        let pose = PoseSE3::from_axis_angle(axis, 0.1 * magnitude * spin, t)?;
        let rep = reproject(&inv_depth, &pose, &cam)?;
        let hw = h * w;
        let too_far = (0..hw).any(|p| {
            rep.valid[p] && rep.flow.data()[p].hypot(rep.flow.data()[hw + p]) > cfg.max_flow
        });
        if too_far {
            magnitude *= 0.5;
            continue;
        }
        let Some(f_j) = render_target(&texture, &blocks, &pose, &cam, plane, c, h, w, &mut rng) else {
            magnitude *= 0.5;
            continue;
        };
        let noise = Normal::new(0.0, AMBIGUOUS_NOISE).expect("positive sigma");
        let mut ambiguous = vec![false; hw];
        let mut f_i = Tensor::zeros(&[c, h, w]);
        for p in 0..hw {
            let (x, y) = ((p % w) as f64, (p / w) as f64);
            ambiguous[p] = blocks.flat_at(x, y);
            for ch in 0..c {
                f_i.data_mut()[ch * hw + p] = if ambiguous[p] {
                    texture.flat[ch] + noise.sample(&mut rng)
                } else {
                    texture.eval(ch, x, y)
                };
            }
        }
        return Ok(SceneSample {
            seed,
            f_i,
            f_j,
            inv_depth,
            pose,
            camera: cam,
            flow: rep.flow,
            valid: rep.valid,
            ambiguous,
        });
    }
    Err(Error::Scene(format!(
        "seed {seed}: could not keep flow under {} px after {MAX_RETRIES} damped retries",
        cfg.max_flow
    )))
}

/// Paints the target frame by pulling each target pixel back onto the plane.
#[allow(clippy::too_many_arguments)]
fn render_target(
    texture: &Texture,
    blocks: &Blocks,
    pose: &PoseSE3,
    cam: &Camera,
    plane: [f64; 3],
    c: usize,
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> Option<Tensor> {
    let rn = pose.rotate(plane);
    let t = pose.translation();
    let denom = 1.0 + rn[0] * t[0] + rn[1] * t[1] + rn[2] * t[2];
    if !(denom.abs() > 1e-9) {
        return None;
    }
    let plane_j = rn.map(|v| v / denom);
    let back = pose.inverse();
    let noise = Normal::new(0.0, AMBIGUOUS_NOISE).expect("positive sigma");
    let hw = h * w;
    let mut out = Tensor::zeros(&[c, h, w]);
    for q in 0..hw {
        let (x, y) = ((q % w) as f64, (q / w) as f64);
        let d = plane_j[0] * (x - cam.cx) / cam.fx + plane_j[1] * (y - cam.cy) / cam.fy + plane_j[2];
        if !(d > 0.0) {
            return None;
        }
        let pp = project_point(x, y, d, &back, cam);
        if !(pp.depth > super::MIN_DEPTH) {
            return None;
        }
        let (sx, sy) = (x + pp.flow.0, y + pp.flow.1);
        let flat = blocks.flat_at(sx, sy);
        for ch in 0..c {
            out.data_mut()[ch * hw + q] = if flat {
                texture.flat[ch] + noise.sample(rng)
            } else {
                texture.eval(ch, sx, sy)
            };
        }
    }
    Some(out)
}
