//! Human-readable design report.

use std::fmt::Write;

use elphgo::gain_design::{build_f, GainCertificate, HURWITZ_MARGIN};
use elphgo::matrices::max_real_eigenvalue;

use crate::config::Scenario;

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
    format!("[{}]", parts.join(", "))
}

fn fmt_sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6e}")).collect();
    format!("[{}]", parts.join(", "))
}

/// Lists the structural checks, then every certificate constant with its
/// sample evidence, or the reason the certificate could not be issued.
pub fn design_report(sc: &Scenario, result: &Result<GainCertificate, String>) -> String {
    let mut s = String::new();
    let ix = sc.plant.indices();
    let _ = writeln!(s, "design report: {} (profile {}, seed {})", sc.name, sc.profile, sc.seed);
    let _ = writeln!(s, "structure: n0 = {}, r = {:?}", ix.n0(), ix.r());
    for (k, kk) in sc.controller.k_blocks().iter().enumerate() {
        let _ = writeln!(s, "K_{} = {}", k + 1, fmt_vec(kk));
    }
    for (k, g) in sc.gamma.iter().enumerate() {
        let re = max_real_eigenvalue(&build_f(g));
        let mark = if re < -HURWITZ_MARGIN { "✓" } else { "✗" };
        let _ = writeln!(s, "F_{} Hurwitz {mark} (max Re = {re:.6e})", k + 1);
    }
    let cert = match result {
        Ok(c) => c,
        Err(msg) => {
            let _ = writeln!(s, "status: FAILED: {msg}");
            return s;
        }
    };
    let ev = &cert.evidence;
    let _ = writeln!(
        s,
        "mu0 = {:.6} (sampled max {:.6} over {} samples)",
        cert.mu0, ev.mu0.sampled_max, ev.mu0.sample_count
    );
    let _ = writeln!(
        s,
        "l = {} (sampled requirement sup|a + K xi|/(1 - mu0) = {:.6} over {} samples)",
        cert.sat_level,
        ev.saturation.sup_norm / (1.0 - cert.mu0),
        ev.saturation.samples
    );
    for (k, ch) in ev.channels.iter().enumerate() {
        let _ = writeln!(
            s,
            "channel {}: peak |G(jw)| = {:.6} at w = {:.6e} ({} points), lambda = {:.6e}, max sampled dissipation {:.3e}",
            k + 1,
            ch.peak.gain,
            ch.peak.omega,
            ch.peak.points,
            cert.lambda[k],
            ch.dissipation_max
        );
    }
    let _ = writeln!(
        s,
        "combined inequality: max sampled ratio {:.3e} over {} states x {} gain perturbations",
        ev.combined.max_sampled_ratio, ev.combined.eta_samples, ev.combined.delta_draws
    );
    for (k, row) in cert.iota.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let _ = writeln!(s, "iota_{}{} = {v:.6e}", k + 1, j + 1);
        }
    }
    let _ = writeln!(s, "delta1 = {:.6e}, delta2 = {:.6e}", cert.delta1, cert.delta2);
    let _ = writeln!(s, "rho0 = {:.6e}, rho1 = {:.6e}", cert.rho0, cert.rho1);
    let _ = writeln!(s, "alpha1 = {:.6e}, alpha2 = {:.6e}", cert.alpha1, cert.alpha2);
    let _ = writeln!(s, "g = {}", fmt_sci(&cert.g));
    let _ = writeln!(s, "theta* = {:.6e}, kappa = {:.6e}", cert.theta_star, cert.kappa);
    let _ = writeln!(s, "ell = {}", fmt_sci(&cert.ell));
    let _ = writeln!(
        s,
        "cascade inequality: min normalized value {:.3e} over {} kappa samples",
        ev.psi.min_normalized, ev.psi.kappa_samples
    );
    let _ = writeln!(s, "status: certified");
    s
}
