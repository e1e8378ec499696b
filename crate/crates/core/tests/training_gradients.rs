//! Analytic gradients of the training losses against five-point central
//! differences on micro networks in f64.

#[path = "support/micro.rs"]
mod micro;

use micro::*;

const TOL: f64 = 1e-4;

fn assert_report(r: GradReport) {
    assert!(r.params > 0, "{}: no parameters checked", r.name);
    assert!(r.max_rel_err <= TOL, "{}: max relative error {:.3e} over {} params", r.name, r.max_rel_err, r.params);
    // a parameter is skipped only if every stencil step crosses a kink
    assert!(r.skipped * 100 <= r.params + r.skipped, "{}: {} of {} params skipped", r.name, r.skipped, r.params + r.skipped);
}

#[test]
fn micro_nets_are_small() {
    for cfg in micro_translation_configs() {
        for (n, c) in ["generator", "discriminator", "heads"].iter().zip(micro_param_counts(&cfg)) {
            assert!(c <= 500, "{n} has {c} parameters");
        }
    }
}

#[test]
fn discriminator_loss() {
    for (i, cfg) in micro_translation_configs().iter().enumerate() {
        assert_report(check_d_loss(cfg, i as u64));
    }
}

#[test]
fn generator_objective() {
    for (i, cfg) in micro_translation_configs().iter().enumerate() {
        assert_report(check_g_loss(cfg, 10 + i as u64));
    }
}

#[test]
fn patchnce_through_generator_and_heads() {
    for (i, cfg) in micro_translation_configs().iter().enumerate() {
        assert_report(check_patchnce(cfg, 20 + i as u64));
    }
}

#[test]
fn segmentation_bce() {
    assert_report(check_seg_bce(30));
}
