//! Stage 2: double inversion with feature and attention injection.
//!
//! The coarse clip is inverted with a video backend while the site
//! activations of the last few inversion steps are recorded. Sampling then
//! starts from the inverted latents, conditioned on the first copy frame and
//! the alignment prompt, and the first few sampling steps per site replay
//! the recorded activations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffusion::{
    check_sites, decode_clip, encode_clip, invert_on, sample_on, Condition, DiffusionBackend,
    Injector, LatentClip, NoiseSchedule, Site, SiteHook, DEFAULT_INFERENCE_STEPS,
};
use crate::error::{Error, Result};
use crate::frame::{Clip, Frame};

/// How many leading sampling steps replay recorded activations, per site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectionSchedule {
    pub feature_steps: usize,
    pub spatial_attn_steps: usize,
    pub temporal_attn_steps: usize,
    pub total_steps: usize,
    /// Weight of the recorded activation; 1 replaces outright.
    pub blend: f64,
}

impl Default for InjectionSchedule {
    fn default() -> Self {
        Self {
            feature_steps: 5,
            spatial_attn_steps: 5,
            temporal_attn_steps: 5,
            total_steps: DEFAULT_INFERENCE_STEPS,
            blend: 1.0,
        }
    }
}

impl InjectionSchedule {
    /// A schedule that injects nothing.
    pub fn disabled(total_steps: usize) -> Self {
        Self {
            feature_steps: 0,
            spatial_attn_steps: 0,
            temporal_attn_steps: 0,
            total_steps,
            blend: 1.0,
        }
    }

    /// The same count for every site.
    pub fn uniform(steps: usize, total_steps: usize) -> Self {
        Self {
            feature_steps: steps,
            spatial_attn_steps: steps,
            temporal_attn_steps: steps,
            total_steps,
            blend: 1.0,
        }
    }

    pub fn steps_for(&self, site: Site) -> usize {
        match site {
            Site::SpatialFeature => self.feature_steps,
            Site::SpatialAttention => self.spatial_attn_steps,
            Site::TemporalAttention => self.temporal_attn_steps,
        }
    }

    /// Sites with a nonzero count.
    pub fn active_sites(&self) -> Vec<Site> {
        Site::ALL
            .into_iter()
            .filter(|&s| self.steps_for(s) > 0)
            .collect()
    }

    /// Whether sampling timestep `t` (counting down from `total_steps`)
    /// falls inside `site`'s window.
    pub fn covers(&self, site: Site, t: usize) -> bool {
        t <= self.total_steps && t + self.steps_for(site) > self.total_steps
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::InvalidInput("total steps must be positive".into()));
        }
        for site in Site::ALL {
            let k = self.steps_for(site);
            if k > self.total_steps {
                return Err(Error::InvalidInput(format!(
                    "{site} injection steps {k} exceed total steps {}",
                    self.total_steps
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.blend) {
            return Err(Error::OutOfRange {
                name: "blend",
                value: self.blend,
            });
        }
        Ok(())
    }
}

/// Site activations captured during inversion, keyed by the sampling
/// timestep they override.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecordedFeatures {
    entries: BTreeMap<(Site, usize), Vec<f64>>,
}

impl RecordedFeatures {
    pub fn get(&self, site: Site, t: usize) -> Option<&[f64]> {
        self.entries.get(&(site, t)).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = (Site, usize)> + '_ {
        self.entries.keys().copied()
    }

    /// Checks that every step the schedule will inject has a record.
    pub fn check_against(&self, schedule: &InjectionSchedule) -> Result<()> {
        for site in schedule.active_sites() {
            let k = schedule.steps_for(site);
            for t in schedule.total_steps + 1 - k..=schedule.total_steps {
                if !self.entries.contains_key(&(site, t)) {
                    return Err(Error::Validation(format!(
                        "no recorded {site} activations for sampling step {t}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Records activations of inversion step `t → t+1` under key `t + 1`, the
/// sampling step that mirrors it.
struct Recorder<'a> {
    schedule: &'a InjectionSchedule,
    out: RecordedFeatures,
}

impl SiteHook for Recorder<'_> {
    fn on_site(&mut self, t: usize, site: Site, values: &mut Vec<f64>) {
        if self.schedule.covers(site, t + 1) {
            self.out.entries.insert((site, t + 1), values.clone());
        }
    }
}

/// Overrides activations inside each site's window with recorded values.
pub struct FeatureInjector<'a> {
    recorded: &'a RecordedFeatures,
    schedule: &'a InjectionSchedule,
}

impl<'a> FeatureInjector<'a> {
    pub fn new(recorded: &'a RecordedFeatures, schedule: &'a InjectionSchedule) -> Self {
        Self { recorded, schedule }
    }
}

impl SiteHook for FeatureInjector<'_> {
    fn on_site(&mut self, t: usize, site: Site, values: &mut Vec<f64>) {
        if !self.schedule.covers(site, t) {
            return;
        }
        let Some(rec) = self.recorded.get(site, t) else {
            return;
        };
        let b = self.schedule.blend;
        if b == 1.0 || rec.len() != values.len() {
            // A length mismatch is reported by the backend after the hook.
            *values = rec.to_vec();
        } else {
            for (v, r) in values.iter_mut().zip(rec) {
                *v = b * r + (1.0 - b) * *v;
            }
        }
    }
}

impl Injector for FeatureInjector<'_> {
    fn claimed_sites(&self) -> Vec<Site> {
        self.schedule.active_sites()
    }
}

/// Inverts the clip unconditionally over a `total_steps` grid, recording
/// the scheduled sites.
pub fn invert_video(
    coarse: &Clip,
    backend: &dyn DiffusionBackend,
    schedule: &InjectionSchedule,
) -> Result<(LatentClip, RecordedFeatures)> {
    schedule.validate()?;
    check_sites(backend, &schedule.active_sites())?;
    let grid = grid(backend, schedule)?;
    let z0 = encode_clip(backend, coarse)?;
    let mut rec = Recorder {
        schedule,
        out: RecordedFeatures::default(),
    };
    let zeta = invert_on(
        &grid,
        &z0,
        schedule.total_steps,
        &Condition::unconditional(),
        backend,
        &mut rec,
    )?;
    Ok((zeta, rec.out))
}

/// Denoises `zeta` conditioned on `first_frame` and `cond_align`, replaying
/// recorded activations per the schedule.
pub fn align(
    zeta: &LatentClip,
    first_frame: &Frame,
    cond_align: &Condition,
    recorded: &RecordedFeatures,
    schedule: &InjectionSchedule,
    backend: &dyn DiffusionBackend,
    fps: f64,
) -> Result<Clip> {
    let z = align_latents(zeta, first_frame, cond_align, recorded, schedule, backend)?;
    decode_clip(backend, &z, fps)
}

pub fn align_latents(
    zeta: &LatentClip,
    first_frame: &Frame,
    cond_align: &Condition,
    recorded: &RecordedFeatures,
    schedule: &InjectionSchedule,
    backend: &dyn DiffusionBackend,
) -> Result<LatentClip> {
    schedule.validate()?;
    let mut injector = FeatureInjector::new(recorded, schedule);
    check_sites(backend, &injector.claimed_sites())?;
    recorded.check_against(schedule)?;
    let grid = grid(backend, schedule)?;
    let cond = cond_align.clone().with_first_frame(first_frame.clone());
    sample_on(
        &grid,
        zeta,
        schedule.total_steps,
        &cond,
        backend,
        &mut injector,
    )
}

fn grid(backend: &dyn DiffusionBackend, schedule: &InjectionSchedule) -> Result<NoiseSchedule> {
    backend.schedule().subsample(schedule.total_steps)
}

/// Stage 2 end to end: invert the coarse clip, then align it against the
/// first frame of the copy clip.
pub fn run_d_inv(
    copy: &Clip,
    coarse: &Clip,
    cond_align: &Condition,
    backend: &dyn DiffusionBackend,
    schedule: &InjectionSchedule,
) -> Result<Clip> {
    if copy.len() != coarse.len() {
        return Err(Error::mismatch(
            "coarse clip length",
            copy.len(),
            coarse.len(),
        ));
    }
    if copy.dims() != coarse.dims() {
        return Err(Error::mismatch(
            "coarse clip dims",
            format!("{:?}", copy.dims()),
            format!("{:?}", coarse.dims()),
        ));
    }
    let (zeta, recorded) = invert_video(coarse, backend, schedule)?;
    let out = align(
        &zeta,
        &copy.frames()[0],
        cond_align,
        &recorded,
        schedule,
        backend,
        coarse.fps,
    )?;
    tracing::debug!(records = recorded.len(), "stage 2 done");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{
        invert_sequence, sample_sequence, BackendRole, Codec, HookChain, NoHook, ToyBackend,
        TraceHook,
    };
    use crate::frame::DEFAULT_FPS;

    fn clip(n: usize, w: u32, h: u32, phase: f64) -> Clip {
        let frames = (0..n)
            .map(|i| {
                Frame::from_fn(w, h, |x, y| {
                    let v = ((x + y) as f64 * 0.3 + i as f64 * 0.5 + phase).sin() * 0.5 + 0.5;
                    [v, 1.0 - v, 0.5 * v]
                })
            })
            .collect();
        Clip::new(frames, DEFAULT_FPS).unwrap()
    }

    fn video_backend() -> ToyBackend {
        ToyBackend::linear_with(BackendRole::Video, Codec::Identity, 3)
    }

    #[test]
    fn schedule_validation() {
        assert!(InjectionSchedule::default().validate().is_ok());
        let mut s = InjectionSchedule::uniform(51, 50);
        assert!(s.validate().is_err());
        s = InjectionSchedule {
            blend: 1.5,
            ..Default::default()
        };
        assert!(s.validate().is_err());
        let s = InjectionSchedule::uniform(5, 50);
        assert!(s.covers(Site::SpatialFeature, 50));
        assert!(s.covers(Site::SpatialFeature, 46));
        assert!(!s.covers(Site::SpatialFeature, 45));
    }

    #[test]
    fn zero_counts_record_nothing() {
        let b = video_backend();
        let c = clip(3, 4, 4, 0.0);
        let s = InjectionSchedule::disabled(20);
        let (zeta, rec) = invert_video(&c, &b, &s).unwrap();
        assert!(rec.is_empty());
        let plain = invert_sequence(
            &encode_clip(&b, &c).unwrap(),
            &Condition::unconditional(),
            &b,
            20,
        )
        .unwrap();
        assert_eq!(zeta, plain);
    }

    #[test]
    fn zero_predictor_inversion_is_a_rescale() {
        let b = ToyBackend::zero();
        let c = clip(2, 4, 4, 0.3);
        let s = InjectionSchedule::disabled(10);
        let (zeta, _) = invert_video(&c, &b, &s).unwrap();
        let grid = b.schedule().subsample(10).unwrap();
        let r = grid.alpha_bar(10).unwrap().sqrt();
        let z0 = encode_clip(&b, &c).unwrap();
        for (a, e) in zeta.as_slice().iter().zip(z0.as_slice()) {
            assert!((a - r * e).abs() <= 1e-12);
        }
    }

    #[test]
    fn recorded_feature_matches_offline_recompute() {
        let b = video_backend();
        let c = clip(2, 4, 4, 0.1);
        let s = InjectionSchedule {
            feature_steps: 3,
            spatial_attn_steps: 0,
            temporal_attn_steps: 0,
            total_steps: 10,
            blend: 1.0,
        };
        let (_, rec) = invert_video(&c, &b, &s).unwrap();
        assert_eq!(rec.len(), 3);

        // Re-run the inversion, keeping the latent entering each step, and
        // evaluate the feature site M·z directly.
        let grid = b.schedule().subsample(10).unwrap();
        let m = b.linear_params().unwrap().mix().to_vec();
        let mut z = encode_clip(&b, &c).unwrap();
        let cond = Condition::unconditional();
        for t in 0..10 {
            if t + 1 > 7 {
                let (nf, ch, cells) = (z.frames(), z.channels(), z.cells());
                let mut expect = vec![0.0; nf * ch * cells];
                for n in 0..nf {
                    for co in 0..ch {
                        for ci in 0..ch {
                            for p in 0..cells {
                                expect[(n * ch + co) * cells + p] +=
                                    m[co * ch + ci] * z.as_slice()[(n * ch + ci) * cells + p];
                            }
                        }
                    }
                }
                let got = rec.get(Site::SpatialFeature, t + 1).unwrap();
                for (g, e) in got.iter().zip(&expect) {
                    assert!((g - e).abs() < 1e-12);
                }
            }
            z = crate::diffusion::step_on(&grid, &z, t, t + 1, &cond, &b, &mut NoHook).unwrap();
        }
    }

    #[test]
    fn disabled_schedule_round_trips_on_replay_backend() {
        let b = ToyBackend::replay(2);
        let c = clip(3, 4, 4, 0.7);
        let s = InjectionSchedule::disabled(50);
        let out = run_d_inv(&c, &c, &Condition::text("align"), &b, &s).unwrap();
        assert!(out.max_abs_diff(&c) < 1e-4);
    }

    #[test]
    fn self_injection_is_a_fixed_point_on_replay_backend() {
        let b = ToyBackend::replay(2);
        let c = clip(3, 4, 4, 0.2);
        let full = InjectionSchedule {
            feature_steps: 50,
            spatial_attn_steps: 0,
            temporal_attn_steps: 0,
            ..Default::default()
        };
        let cond = Condition::text("p");
        let with = run_d_inv(&c, &c, &cond, &b, &full).unwrap();
        let without = run_d_inv(&c, &c, &cond, &b, &InjectionSchedule::disabled(50)).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn full_self_injection_inverts_exactly_on_linear_backend() {
        // With every site overridden, each sampling step reuses the noise
        // estimate of its mirrored inversion step, so DDIM undoes itself.
        let b = video_backend();
        let c = clip(3, 4, 4, 0.4);
        let s = InjectionSchedule::uniform(20, 20);
        let (zeta, rec) = invert_video(&c, &b, &s).unwrap();
        let mut inj = FeatureInjector::new(&rec, &s);
        let z =
            sample_sequence(&zeta, &Condition::unconditional(), &b, 20, Some(&mut inj)).unwrap();
        let z0 = encode_clip(&b, &c).unwrap();
        assert!(z.max_abs_diff(&z0) < 1e-9, "{}", z.max_abs_diff(&z0));

        let plain = sample_sequence(&zeta, &Condition::unconditional(), &b, 20, None).unwrap();
        assert!(plain.max_abs_diff(&z0) > 1e-3);
    }

    #[test]
    fn cross_clip_injection_replays_first_steps_exactly() {
        let b = video_backend();
        let (a, bclip) = (clip(3, 4, 4, 0.0), clip(3, 4, 4, 1.3));
        let s = InjectionSchedule::uniform(5, 20);
        let (_, rec_a) = invert_video(&a, &b, &s).unwrap();
        let (zeta_b, _) = invert_video(&bclip, &b, &s).unwrap();
        let grid = b.schedule().subsample(20).unwrap();
        let cond = Condition::text("x").with_first_frame(bclip.frames()[0].clone());

        let mut inj = FeatureInjector::new(&rec_a, &s);
        let mut trace = TraceHook::default();
        let mut chain = HookChain {
            first: &mut inj,
            second: &mut trace,
        };
        sample_on(&grid, &zeta_b, 20, &cond, &b, &mut chain).unwrap();

        let mut free = TraceHook::default();
        sample_on(&grid, &zeta_b, 20, &cond, &b, &mut free).unwrap();
        for site in Site::ALL {
            for t in 16..=20 {
                assert_eq!(trace.get(t, site).unwrap(), rec_a.get(site, t).unwrap());
            }
            for t in 1..16 {
                assert_ne!(trace.get(t, site).unwrap(), free.get(t, site).unwrap());
            }
        }
    }

    #[test]
    fn longer_window_keeps_the_shared_prefix() {
        let b = video_backend();
        let (a, bclip) = (clip(2, 4, 4, 0.0), clip(2, 4, 4, 2.0));
        let grid = b.schedule().subsample(12).unwrap();
        let cond = Condition::text("y");
        let trace_for = |k: usize| {
            let s = InjectionSchedule::uniform(k, 12);
            let (_, rec) = invert_video(&a, &b, &s).unwrap();
            let (zeta, _) = invert_video(&bclip, &b, &InjectionSchedule::disabled(12)).unwrap();
            let mut inj = FeatureInjector::new(&rec, &s);
            let mut trace = TraceHook::default();
            let mut chain = HookChain {
                first: &mut inj,
                second: &mut trace,
            };
            sample_on(&grid, &zeta, 12, &cond, &b, &mut chain).unwrap();
            trace
        };
        let (short, long) = (trace_for(3), trace_for(6));
        for site in Site::ALL {
            for t in 10..=12 {
                assert_eq!(short.get(t, site), long.get(t, site));
            }
        }
    }

    #[test]
    fn mismatches_are_reported() {
        let replay = ToyBackend::replay(1);
        let c = clip(2, 4, 4, 0.0);
        assert!(matches!(
            invert_video(&c, &replay, &InjectionSchedule::uniform(2, 10)),
            Err(Error::UnknownSite { .. })
        ));
        let b = video_backend();
        let s = InjectionSchedule::uniform(3, 10);
        let (zeta, _) = invert_video(&c, &b, &InjectionSchedule::disabled(10)).unwrap();
        let err = align(
            &zeta,
            &c.frames()[0],
            &Condition::unconditional(),
            &RecordedFeatures::default(),
            &s,
            &b,
            DEFAULT_FPS,
        );
        assert!(matches!(err, Err(Error::Validation(_))));
        assert!(run_d_inv(&c, &clip(3, 4, 4, 0.0), &Condition::unconditional(), &b, &s).is_err());
    }
}
