use fame_core::diffusion::fixture::{fixture_scene, FIXTURE_DIMS, FIXTURE_FAIR, FIXTURE_REF, FIXTURE_TAR};
use fame_core::diffusion::{
    ddim_invert_step, ddim_step, EditConfig, LatentVideo, NoiseSchedule, ScheduleParams, Session,
};
use fame_core::metrics::{intra_region_mass, mean, prompt_responsiveness_test};
use fame_core::region::Layout;
use fame_core::tensor::SeededRng;
use fame_core::Tensor;

fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    a.sub(b).unwrap().norm() / b.norm()
}

#[test]
fn frozen_predictor_round_trip_over_fifty_steps() {
    let s = NoiseSchedule::linear(ScheduleParams::default()).unwrap();
    let mut rng = SeededRng::new(21);
    let z0 = LatentVideo::new(Tensor::new(vec![4, 4, 2, 4], rng.normal_vec(128)).unwrap(), 0).unwrap();
    let eps: Vec<Tensor> = (0..50)
        .map(|_| Tensor::new(vec![4, 4, 2, 4], rng.normal_vec(128)).unwrap())
        .collect();
    let mut z = z0.clone();
    for t in 1..=50 {
        z = ddim_invert_step(&z, &eps[t - 1], t, &s).unwrap();
    }
    for t in (1..=50).rev() {
        z = ddim_step(&z, &eps[t - 1], t, &s).unwrap();
    }
    assert!(rel_err(z.tensor(), z0.tensor()) <= 1e-6);
}

#[test]
fn full_fixture_reconstructs_with_frozen_cache() {
    let (v, m) = fixture_scene(FIXTURE_DIMS, Layout::Disk, 13).unwrap();
    let cfg = EditConfig::default();
    let session = Session::new(&v, &m, &cfg).unwrap();
    let inv = session.invert(FIXTURE_REF).unwrap();
    let reduction = EditConfig {
        rho: 1.0,
        ..cfg.without_fairness()
    };
    let out = session.edit_from(&inv, FIXTURE_REF, FIXTURE_FAIR, &reduction).unwrap();
    assert!(rel_err(out.edited.tensor(), v.tensor()) <= 1e-6);
}

#[test]
fn fairness_modulation_localizes_self_attention() {
    let (v, m) = fixture_scene(FIXTURE_DIMS, Layout::Disk, 13).unwrap();
    let cfg = EditConfig::default();
    let session = Session::new(&v, &m, &cfg).unwrap();
    let inv = session.invert(FIXTURE_REF).unwrap();
    let plain = session.edit_from(&inv, FIXTURE_TAR, FIXTURE_FAIR, &cfg.without_fairness()).unwrap();
    let fair = session.edit_from(&inv, FIXTURE_TAR, FIXTURE_FAIR, &cfg).unwrap();
    let before = mean(&intra_region_mass(&plain.cache, session.regions()).unwrap());
    let after = mean(&intra_region_mass(&fair.cache, session.regions()).unwrap());
    assert!(after > before, "{after} vs {before}");
}

#[test]
fn responsiveness_degenerate_case_is_identical() {
    let (v, m) = fixture_scene([4, 4, 3, 8], Layout::Disk, 13).unwrap();
    let cfg = EditConfig {
        steps: 6,
        dim: 8,
        ..EditConfig::default()
    }
    .without_fairness();
    let r = prompt_responsiveness_test(&v, &m, FIXTURE_REF, FIXTURE_TAR, FIXTURE_TAR, FIXTURE_FAIR, &cfg).unwrap();
    assert_eq!(r.explicit, r.neutral);
    assert_eq!(r.neutral, r.fame);
}

#[test]
fn different_seeds_give_different_edits() {
    let (v, m) = fixture_scene([4, 4, 3, 8], Layout::Disk, 13).unwrap();
    let run = |seed| {
        let cfg = EditConfig {
            seed,
            steps: 4,
            dim: 8,
            ..EditConfig::default()
        };
        let s = Session::new(&v, &m, &cfg).unwrap();
        let inv = s.invert(FIXTURE_REF).unwrap();
        s.edit_from(&inv, FIXTURE_TAR, FIXTURE_FAIR, &cfg).unwrap().edited
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}
