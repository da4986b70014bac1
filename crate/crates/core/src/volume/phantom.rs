use std::collections::BTreeMap;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Contrast, Volume};
use crate::error::{Error, Result};

pub type PhantomSet = BTreeMap<Contrast, Volume>;

const MIN_SIZE: usize = 16;

/// Relative (T1, T2, PD) intensities of the tissue classes: parenchyma,
/// white-matter-like, fluid-like and lesion-like. The head ellipsoid is
/// parenchyma; inner shapes draw one of the other classes.
const TISSUES: [[f32; 3]; 4] = [
    [0.60, 0.45, 0.75],
    [0.85, 0.30, 0.60],
    [0.20, 1.00, 0.95],
    [0.45, 0.80, 0.85],
];

/// Per-subject intensity jitter, as a fraction of the class value.
const JITTER: f32 = 0.03;

/// Fluid partial-volume texture: number of plane waves, wavelength range in
/// voxels, and the largest fluid fraction.
const WAVES: usize = 8;
const WAVELENGTH: (f32, f32) = (3.0, 6.0);
const MAX_FLUID: f32 = 0.35;
const FLUID: usize = 2;

struct Ellipsoid {
    center: [f32; 3],
    radii: [f32; 3],
    // in-plane rotation
    cos: f32,
    sin: f32,
    intensity: BTreeMap<Contrast, f32>,
}

impl Ellipsoid {
    fn contains(&self, p: [f32; 3]) -> bool {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let u = self.cos * dx + self.sin * dy;
        let v = -self.sin * dx + self.cos * dy;
        let w = p[2] - self.center[2];
        (u / self.radii[0]).powi(2) + (v / self.radii[1]).powi(2) + (w / self.radii[2]).powi(2) <= 1.0
    }
}

/// Synthetic co-registered T1/T2/PD volumes built from nested ellipsoids.
///
/// All three contrasts share the same geometry, including a fine
/// partial-volume texture; only the tissue intensities differ. The first shape is a head-sized outer ellipsoid,
/// later shapes are painted over it. `n_shapes = 0` yields all-zero volumes.
pub fn generate_phantom(seed: u64, size: [usize; 3], n_shapes: usize) -> Result<PhantomSet> {
    if size.iter().any(|&s| s < MIN_SIZE) {
        return Err(Error::Config(format!(
            "phantom size must be at least {MIN_SIZE} per axis, got {size:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = size.map(|s| s as f32);
    let mid = dims.map(|d| (d - 1.0) / 2.0);

    let class_intensity = TISSUES.map(|t| t.map(|v| v * (1.0 + rng.gen_range(-JITTER..JITTER))));
    let mut shapes = Vec::with_capacity(n_shapes);
    for k in 0..n_shapes {
        let (center, radii) = if k == 0 {
            let jitter = |rng: &mut ChaCha8Rng, d: f32| rng.gen_range(-0.03..0.03) * d;
            (
                [
                    mid[0] + jitter(&mut rng, dims[0]),
                    mid[1] + jitter(&mut rng, dims[1]),
                    mid[2],
                ],
                [
                    rng.gen_range(0.36..0.44) * dims[0],
                    rng.gen_range(0.40..0.46) * dims[1],
                    0.62 * dims[2],
                ],
            )
        } else {
            let c = [
                mid[0] + rng.gen_range(-0.22..0.22) * dims[0],
                mid[1] + rng.gen_range(-0.25..0.25) * dims[1],
                mid[2] + rng.gen_range(-0.3..0.3) * dims[2],
            ];
            let r = [
                rng.gen_range(0.04..0.16) * dims[0],
                rng.gen_range(0.04..0.16) * dims[1],
                rng.gen_range(0.2..0.5) * dims[2],
            ];
            (c, r)
        };
        let theta: f32 = if k == 0 {
            0.0
        } else {
            rng.gen_range(0.0..std::f32::consts::PI)
        };
        let class = if k == 0 { 0 } else { rng.gen_range(1..TISSUES.len()) };
        let intensity = Contrast::ALL
            .iter()
            .zip(class_intensity[class])
            .map(|(&c, v)| (c, v))
            .collect();
        shapes.push(Ellipsoid {
            center,
            radii,
            cos: theta.cos(),
            sin: theta.sin(),
            intensity,
        });
    }

    // label map: index of the last shape covering each voxel
    let labels = Array3::from_shape_fn((size[0], size[1], size[2]), |(x, y, z)| {
        let p = [x as f32, y as f32, z as f32];
        shapes.iter().rposition(|s| s.contains(p))
    });

    // fine anatomy shared by all contrasts: a band-limited field giving the
    // fraction of fluid mixed into each tissue voxel
    let waves: Vec<([f32; 3], f32)> = (0..WAVES)
        .map(|_| {
            let len = rng.gen_range(WAVELENGTH.0..WAVELENGTH.1);
            let a = rng.gen_range(0.0..std::f32::consts::TAU);
            let tilt = rng.gen_range(-0.3f32..0.3);
            let k = std::f32::consts::TAU / len;
            (
                [k * a.cos(), k * a.sin(), k * tilt],
                rng.gen_range(0.0..std::f32::consts::TAU),
            )
        })
        .collect();
    let norm = (WAVES as f32 / 2.0).sqrt();
    let fluid = Array3::from_shape_fn((size[0], size[1], size[2]), |(x, y, z)| {
        let p = [x as f32, y as f32, z as f32];
        let s: f32 = waves
            .iter()
            .map(|(k, phase)| (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).cos())
            .sum();
        MAX_FLUID * (0.5 + 0.35 * s / norm).clamp(0.0, 1.0)
    });

    let subject = format!("PH{seed:06}");
    let mut out = PhantomSet::new();
    for (ci, contrast) in Contrast::ALL.into_iter().enumerate() {
        let fluid_value = class_intensity[FLUID][ci];
        let mut data = Array3::from_shape_fn(labels.raw_dim(), |idx| {
            labels[idx].map_or(0.0, |i| {
                let t = fluid[idx];
                (1.0 - t) * shapes[i].intensity[&contrast] + t * fluid_value
            })
        });
        let max = data.iter().copied().fold(0.0f32, f32::max);
        if max > 0.0 {
            data.mapv_inplace(|v| v / max);
        }
        let v = Volume::new(data, [1.0; 3], contrast, subject.clone())?.into_normalized()?;
        out.insert(contrast, v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let a = generate_phantom(5, [16, 20, 16], 6).unwrap();
        let b = generate_phantom(5, [16, 20, 16], 6).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(6, [16, 20, 16], 6).unwrap();
        assert_ne!(a[&Contrast::T2], c[&Contrast::T2]);
    }

    #[test]
    fn contrasts_share_support() {
        let p = generate_phantom(9, [32, 32, 16], 8).unwrap();
        let support = |c: Contrast| p[&c].data().mapv(|v| v > 0.0);
        assert_eq!(support(Contrast::T1), support(Contrast::T2));
        assert_eq!(support(Contrast::PD), support(Contrast::T2));
        assert!(support(Contrast::T2).iter().any(|&b| b));
        for v in p.values() {
            assert!(v.is_normalized());
            assert!(v.data().iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn no_shapes_is_background() {
        let p = generate_phantom(1, [16, 16, 16], 0).unwrap();
        assert!(p.values().all(|v| v.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn too_small() {
        assert!(matches!(generate_phantom(1, [15, 16, 16], 3), Err(Error::Config(_))));
    }
}
