use elphgo::control_law::ControllerConfig;
use elphgo::gain_design::{design_certificate, design_k, gain_cascade, DesignOptions};
use elphgo::normal_form::PlantState;
use elphgo::observer::{default_gamma, ObserverGains, ObserverState};
use elphgo::plants::LinearChains;
use elphgo::region::Region;
use elphgo::simulator::{simulate_closed_loop, simulate_ideal, suggest_dt, Certification, IntegratorConfig, Outcome, SimOptions};
use nalgebra::DMatrix;

/// Double integrator with one stable zero-dynamics state and a 20% gain error.
fn mismatched() -> elphgo::normal_form::PlantModel {
    let mut lin = LinearChains::new(1, &[2]);
    lin.b = DMatrix::from_element(1, 1, 1.2);
    lin.f0[(0, 1)] = 0.5;
    lin.build(1, vec![2]).unwrap()
}

fn controller(sat: f64) -> ControllerConfig {
    let k = design_k(2, &[-1.0, -1.0]).unwrap();
    ControllerConfig::new(DMatrix::identity(1, 1), vec![k], sat, 0.5).unwrap()
}

fn options() -> DesignOptions {
    DesignOptions {
        mu0_samples: 2000,
        saturation_samples: 2000,
        sweep_points: 2000,
        dissipation_samples: 2000,
        eta_samples: 2000,
        delta_draws: 5,
        psi_samples: 50,
        ..DesignOptions::default()
    }
}

#[test]
fn certified_gains_stabilize_the_loop() {
    let plant = mismatched();
    let cfg = controller(20.0);
    let gamma = vec![default_gamma(2).unwrap()];
    let region = Region::Box { lo: vec![-1.0; 3], hi: vec![1.0; 3] };
    let cert = design_certificate(&plant, &cfg, &gamma, &region, &options()).unwrap();
    cert.verify().unwrap();
    assert!(cert.mu0 >= 0.2 && cert.mu0 < 0.25, "mu0 {}", cert.mu0);
    assert_eq!(cert.ell.len(), 1);
    assert_eq!(cert.ell, gain_cascade(&cert.g, cert.kappa, &cert.r).unwrap());
    assert!(cert.kappa >= cert.theta_star);

    let gains = ObserverGains::new(gamma.clone(), cert.ell.clone()).unwrap();
    let dt = suggest_dt(&cert.ell, &gamma, 0.5);
    let steps = (10.0 / dt).ceil() as usize;
    assert!(steps < 5_000_000, "certified gain {} is too stiff for a test run", cert.ell[0]);
    let integ = IntegratorConfig::new(dt, 10.0, (steps / 200).max(1));
    let ix = plant.indices();
    let x = PlantState::unflatten(ix, &[0.5, 0.5, -0.5]).unwrap();
    let tr = simulate_closed_loop(
        &plant,
        &cfg,
        &gains,
        &x,
        &ObserverState::zeros(ix),
        &integ,
        Certification::Certified(&cert),
        SimOptions::default(),
    )
    .unwrap();
    assert_eq!(tr.outcome, Outcome::Completed);
    assert!(tr.final_norm() < 1e-2 * tr.norms[0], "final {}", tr.final_norm());
}

#[test]
fn observer_loop_tracks_the_ideal_loop_as_gains_grow() {
    let plant = mismatched();
    let cfg = controller(20.0);
    let gamma = vec![default_gamma(2).unwrap()];
    let ix = plant.indices();
    let x = PlantState::unflatten(ix, &[0.5, 0.5, -0.5]).unwrap();
    let ideal = simulate_ideal(&plant, &cfg, &x, &IntegratorConfig::new(1e-3, 4.0, 100)).unwrap();
    let mut gaps = Vec::new();
    for kappa in [20.0, 80.0] {
        let ell = gain_cascade(&[1.0], kappa, ix.r()).unwrap();
        let gains = ObserverGains::new(gamma.clone(), ell.clone()).unwrap();
        let tr = simulate_closed_loop(
            &plant,
            &cfg,
            &gains,
            &x,
            &ObserverState::zeros(ix),
            &IntegratorConfig::new(1e-4, 4.0, 1000),
            Certification::Waived,
            SimOptions::default(),
        )
        .unwrap();
        let gap = tr.norms.iter().zip(&ideal.norms).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        gaps.push(gap);
    }
    assert!(gaps[1] < gaps[0], "{gaps:?}");
}
