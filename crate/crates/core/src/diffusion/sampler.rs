//! Forward noising and deterministic DDIM stepping in both directions.
//!
//! Both directions use the ε-parameterised update
//!
//! ```text
//! z_to = √(ᾱ_to/ᾱ_from)·z_from + (√(1−ᾱ_to) − √(ᾱ_to/ᾱ_from)·√(1−ᾱ_from))·ε(z_from)
//! ```
//!
//! which is an Euler step of the probability-flow ODE in the variables
//! `x = z/√ᾱ`, `σ = √(1/ᾱ − 1)`.

use super::backend::{Condition, DiffusionBackend, NoHook, Site, SiteHook};
use super::latent::LatentClip;
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};

/// Hook that claims a set of sites; checked against the backend before a
/// sampling pass starts.
pub trait Injector: SiteHook {
    fn claimed_sites(&self) -> Vec<Site>;
}

/// `z_t = √ᾱ_t·z₀ + √(1−ᾱ_t)·ε`.
pub fn forward_noise(
    z0: &LatentClip,
    t: usize,
    eps: &LatentClip,
    schedule: &NoiseSchedule,
) -> Result<LatentClip> {
    z0.same_shape(eps)?;
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z0
        .as_slice()
        .iter()
        .zip(eps.as_slice())
        .map(|(z, e)| a * z + b * e)
        .collect();
    let [n, c, h, w] = z0.shape();
    LatentClip::from_vec(n, c, h, w, data)
}

/// One deterministic DDIM transfer between noise levels `ab_from → ab_to`.
pub fn ddim_transfer(z: &[f64], eps: &[f64], ab_from: f64, ab_to: f64) -> Vec<f64> {
    let ratio = (ab_to / ab_from).sqrt();
    let coef = (1.0 - ab_to).sqrt() - ratio * (1.0 - ab_from).sqrt();
    z.iter()
        .zip(eps)
        .map(|(z, e)| ratio * z + coef * e)
        .collect()
}

/// Steps from `t_from` to `t_to` on `grid`, evaluating the predictor at
/// `(z, t_from)`.
pub fn step_on(
    grid: &NoiseSchedule,
    z: &LatentClip,
    t_from: usize,
    t_to: usize,
    cond: &Condition,
    backend: &dyn DiffusionBackend,
    hook: &mut dyn SiteHook,
) -> Result<LatentClip> {
    let ab_from = grid.alpha_bar(t_from)?;
    let ab_to = grid.alpha_bar(t_to)?;
    let eps = backend.predict_noise(z, t_from, cond, hook)?;
    z.same_shape(&eps)?;
    let data = ddim_transfer(z.as_slice(), eps.as_slice(), ab_from, ab_to);
    let [n, c, h, w] = z.shape();
    LatentClip::from_vec(n, c, h, w, data)
}

/// Denoising step `t → t−1` on the backend's schedule.
pub fn ddim_step(
    z: &LatentClip,
    t: usize,
    cond: &Condition,
    backend: &dyn DiffusionBackend,
) -> Result<LatentClip> {
    let schedule = backend.schedule();
    if t == 0 || t > schedule.steps() {
        return Err(Error::Timestep {
            t,
            len: schedule.values().len(),
        });
    }
    step_on(schedule, z, t, t - 1, cond, backend, &mut NoHook)
}

/// Inversion step `t → t+1` on the backend's schedule.
pub fn ddim_invert_step(
    z: &LatentClip,
    t: usize,
    cond: &Condition,
    backend: &dyn DiffusionBackend,
) -> Result<LatentClip> {
    let schedule = backend.schedule();
    if t >= schedule.steps() {
        return Err(Error::Timestep {
            t,
            len: schedule.values().len(),
        });
    }
    step_on(schedule, z, t, t + 1, cond, backend, &mut NoHook)
}

/// Inverts from `t = 0` up to `t = depth` on `grid`. The hook sees every
/// predictor call; the call for the step `t → t+1` carries timestep `t`.
pub fn invert_on(
    grid: &NoiseSchedule,
    z0: &LatentClip,
    depth: usize,
    cond: &Condition,
    backend: &dyn DiffusionBackend,
    hook: &mut dyn SiteHook,
) -> Result<LatentClip> {
    check_depth(grid, depth)?;
    let mut z = z0.clone();
    for t in 0..depth {
        z = step_on(grid, &z, t, t + 1, cond, backend, hook)?;
    }
    Ok(z)
}

/// Denoises from `t = depth` down to `t = 0` on `grid`. The call for the
/// step `t → t−1` carries timestep `t`.
pub fn sample_on(
    grid: &NoiseSchedule,
    z: &LatentClip,
    depth: usize,
    cond: &Condition,
    backend: &dyn DiffusionBackend,
    hook: &mut dyn SiteHook,
) -> Result<LatentClip> {
    check_depth(grid, depth)?;
    let mut z = z.clone();
    for t in (1..=depth).rev() {
        z = step_on(grid, &z, t, t - 1, cond, backend, hook)?;
    }
    Ok(z)
}

fn check_depth(grid: &NoiseSchedule, depth: usize) -> Result<()> {
    if depth > grid.steps() {
        return Err(Error::InvalidInput(format!(
            "depth {depth} exceeds the {}-step grid",
            grid.steps()
        )));
    }
    Ok(())
}

/// Full-depth inversion over a `steps`-step inference grid.
pub fn invert_sequence(
    z0: &LatentClip,
    cond: &Condition,
    backend: &dyn DiffusionBackend,
    steps: usize,
) -> Result<LatentClip> {
    let grid = backend.schedule().subsample(steps)?;
    invert_on(&grid, z0, steps, cond, backend, &mut NoHook)
}

/// Full-depth sampling over a `steps`-step inference grid, optionally with
/// an injector overriding site activations.
pub fn sample_sequence(
    z_t: &LatentClip,
    cond: &Condition,
    backend: &dyn DiffusionBackend,
    steps: usize,
    injector: Option<&mut dyn Injector>,
) -> Result<LatentClip> {
    let grid = backend.schedule().subsample(steps)?;
    match injector {
        None => sample_on(&grid, z_t, steps, cond, backend, &mut NoHook),
        Some(inj) => {
            check_sites(backend, &inj.claimed_sites())?;
            sample_on(&grid, z_t, steps, cond, backend, inj)
        }
    }
}

pub(crate) fn check_sites(backend: &dyn DiffusionBackend, sites: &[Site]) -> Result<()> {
    match sites.iter().find(|s| !backend.has_site(**s)) {
        Some(s) => Err(Error::UnknownSite {
            backend: backend.id().to_string(),
            site: s.name().to_string(),
        }),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::toy::{BackendRole, ToyBackend};
    use crate::diffusion::Codec;
    use crate::rng;

    fn latents(n: usize, c: usize, h: usize, w: usize, seed: u64) -> LatentClip {
        LatentClip::from_vec(n, c, h, w, rng::normals(seed, 0, n * c * h * w)).unwrap()
    }

    fn scalar(v: f64) -> LatentClip {
        LatentClip::from_vec(1, 1, 1, 1, vec![v]).unwrap()
    }

    #[test]
    fn forward_noise_trivial() {
        let s = NoiseSchedule::new(vec![1.0, 0.25, 0.1]).unwrap();
        let z = latents(1, 2, 2, 2, 1);
        let e = latents(1, 2, 2, 2, 2);
        assert_eq!(forward_noise(&z, 0, &e, &s).unwrap(), z);
        let out = forward_noise(&scalar(1.0), 1, &scalar(0.0), &s).unwrap();
        assert_eq!(out.as_slice(), &[0.5]);
        assert!(forward_noise(&z, 3, &e, &s).is_err());
    }

    #[test]
    fn transfer_degenerate_and_zero_predictor() {
        let z = [0.3, -1.2, 4.0];
        let eps = [9.0, -2.0, 0.5];
        assert_eq!(ddim_transfer(&z, &eps, 0.4, 0.4), z.to_vec());
        let out = ddim_transfer(&z, &[0.0; 3], 0.4, 0.9);
        let r = (0.9f64 / 0.4).sqrt();
        assert_eq!(out, z.iter().map(|v| v * r).collect::<Vec<_>>());
    }

    #[test]
    fn step_ops_with_zero_predictor_rescale() {
        let b = ToyBackend::zero();
        let s = b.schedule();
        let z = latents(1, 3, 2, 2, 3);
        let cond = Condition::unconditional();
        let down = ddim_step(&z, 10, &cond, &b).unwrap();
        let up = ddim_invert_step(&z, 10, &cond, &b).unwrap();
        let rd = (s.alpha_bar(9).unwrap() / s.alpha_bar(10).unwrap()).sqrt();
        let ru = (s.alpha_bar(11).unwrap() / s.alpha_bar(10).unwrap()).sqrt();
        for i in 0..z.as_slice().len() {
            assert_eq!(down.as_slice()[i], rd * z.as_slice()[i]);
            assert_eq!(up.as_slice()[i], ru * z.as_slice()[i]);
        }
        assert!(matches!(
            ddim_step(&z, 0, &cond, &b),
            Err(Error::Timestep { .. })
        ));
        assert!(matches!(
            ddim_invert_step(&z, 1000, &cond, &b),
            Err(Error::Timestep { .. })
        ));
    }

    #[test]
    fn constant_predictor_step_pair_is_exact_inverse() {
        let b = ToyBackend::constant(0.37);
        let z = latents(2, 3, 4, 4, 5);
        let cond = Condition::unconditional();
        for t in [0, 1, 250, 998] {
            let back = ddim_step(
                &ddim_invert_step(&z, t, &cond, &b).unwrap(),
                t + 1,
                &cond,
                &b,
            )
            .unwrap();
            for (a, e) in back.as_slice().iter().zip(z.as_slice()) {
                assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0));
            }
        }
    }

    /// Probability-flow ODE in (σ, x = z/√ᾱ) for ε(z) = M·z, integrated with
    /// classical RK4 using `sub` substeps per interval.
    fn reference_flow(
        m: &[f64],
        c: usize,
        z: &[f64],
        ab_from: f64,
        ab_to: f64,
        sub: usize,
    ) -> Vec<f64> {
        let sig = |ab: f64| (1.0 / ab - 1.0).sqrt();
        let (s0, s1) = (sig(ab_from), sig(ab_to));
        let cells = z.len() / c;
        let deriv = |s: f64, x: &[f64]| -> Vec<f64> {
            let ab = 1.0 / (1.0 + s * s);
            let zc: Vec<f64> = x.iter().map(|v| v * ab.sqrt()).collect();
            let mut out = vec![0.0; x.len()];
            for co in 0..c {
                for ci in 0..c {
                    for p in 0..cells {
                        out[co * cells + p] += m[co * c + ci] * zc[ci * cells + p];
                    }
                }
            }
            out
        };
        let mut x: Vec<f64> = z.iter().map(|v| v / ab_from.sqrt()).collect();
        let h = (s1 - s0) / sub as f64;
        for i in 0..sub {
            let s = s0 + h * i as f64;
            let k1 = deriv(s, &x);
            let x2: Vec<f64> = x.iter().zip(&k1).map(|(a, k)| a + 0.5 * h * k).collect();
            let k2 = deriv(s + 0.5 * h, &x2);
            let x3: Vec<f64> = x.iter().zip(&k2).map(|(a, k)| a + 0.5 * h * k).collect();
            let k3 = deriv(s + 0.5 * h, &x3);
            let x4: Vec<f64> = x.iter().zip(&k3).map(|(a, k)| a + h * k).collect();
            let k4 = deriv(s + h, &x4);
            for j in 0..x.len() {
                x[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }
        }
        x.iter().map(|v| v * ab_to.sqrt()).collect()
    }

    #[test]
    fn linear_sampling_converges_to_probability_flow() {
        let b = ToyBackend::linear_with(BackendRole::Image, Codec::Identity, 11);
        let m = b.linear_params().unwrap().mix().to_vec();
        let z0 = latents(1, 3, 2, 2, 6);
        let cond = Condition::unconditional();
        // Start from a mid-level latent and denoise to t = 0 over [0, 500] of the schedule.
        let full = b.schedule();
        let ab_start = full.alpha_bar(500).unwrap();
        let ab_end = full.alpha_bar(0).unwrap();
        let reference = reference_flow(&m, 3, z0.as_slice(), ab_start, ab_end, 100 * 40);

        let err = |k: usize| {
            let mut z = z0.clone();
            let grid: Vec<usize> = (0..=k).map(|i| 500 * i / k).collect();
            for i in (1..=k).rev() {
                let ab = |t| full.alpha_bar(t).unwrap();
                let eps = b.predict_noise(&z, grid[i], &cond, &mut NoHook).unwrap();
                let d = ddim_transfer(z.as_slice(), eps.as_slice(), ab(grid[i]), ab(grid[i - 1]));
                z = LatentClip::from_vec(1, 3, 2, 2, d).unwrap();
            }
            z.as_slice()
                .iter()
                .zip(&reference)
                .map(|(a, r)| (a - r).abs())
                .fold(0.0, f64::max)
        };
        let (e10, e20, e40) = (err(10), err(20), err(40));
        assert!(e40 < 0.1, "{e40}");
        assert!(e20 / e10 < 0.6 && e40 / e20 < 0.6, "{e10} {e20} {e40}");
    }

    #[test]
    fn linear_round_trip_error_is_first_order() {
        let b = ToyBackend::linear_with(BackendRole::Image, Codec::Identity, 11);
        let z0 = latents(1, 3, 4, 4, 7);
        let cond = Condition::unconditional();
        let rt = |steps| {
            let inv = invert_sequence(&z0, &cond, &b, steps).unwrap();
            sample_sequence(&inv, &cond, &b, steps, None)
                .unwrap()
                .max_abs_diff(&z0)
        };
        let (e50, e100, e200) = (rt(50), rt(100), rt(200));
        assert!(
            e100 <= 0.6 * e50 && e200 <= 0.6 * e100,
            "{e50} {e100} {e200}"
        );
    }

    #[test]
    fn unknown_injector_site_is_rejected() {
        struct Claims;
        impl SiteHook for Claims {
            fn on_site(&mut self, _: usize, _: Site, _: &mut Vec<f64>) {}
        }
        impl Injector for Claims {
            fn claimed_sites(&self) -> Vec<Site> {
                vec![Site::TemporalAttention]
            }
        }
        let b = ToyBackend::zero();
        let z = latents(1, 3, 2, 2, 1);
        let err = sample_sequence(&z, &Condition::unconditional(), &b, 10, Some(&mut Claims));
        assert!(matches!(err, Err(Error::UnknownSite { .. })));
    }

    #[test]
    fn noop_injector_is_bit_identical() {
        struct Noop;
        impl SiteHook for Noop {
            fn on_site(&mut self, _: usize, _: Site, _: &mut Vec<f64>) {}
        }
        impl Injector for Noop {
            fn claimed_sites(&self) -> Vec<Site> {
                vec![Site::SpatialFeature, Site::SpatialAttention]
            }
        }
        let b = ToyBackend::linear(BackendRole::Video);
        let z = latents(3, 4, 2, 2, 2);
        let cond = Condition::text("x");
        let plain = sample_sequence(&z, &cond, &b, 20, None).unwrap();
        let hooked = sample_sequence(&z, &cond, &b, 20, Some(&mut Noop)).unwrap();
        assert_eq!(plain, hooked);
    }
}
