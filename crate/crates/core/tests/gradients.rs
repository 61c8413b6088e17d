use hvpp_core::gradcheck::{standard_suite, GradCheckOptions};
use hvpp_core::tensor::Real;

fn run_suite<T: Real>() {
    let tol = GradCheckOptions::tolerance::<T>();
    let mut failed = Vec::new();
    for case in standard_suite::<T>(0) {
        let report = case.run(1).unwrap();
        let worst = report.worst().map(|t| t.name.clone()).unwrap_or_default();
        println!(
            "{:22} {:9.3e} (worst tensor {worst}, |g| {:.3e}, skipped {}/{})",
            case.name,
            report.max_rel_error(),
            report.grad_norm(),
            report.skipped(),
            report.probes()
        );
        assert!(report.grad_norm() > 0.0, "{}: gradient is identically zero", case.name);
        if !report.passes(tol) {
            failed.push((case.name, report.max_rel_error()));
        }
    }
    assert!(failed.is_empty(), "failed at tolerance {tol:e}: {failed:?}");
}

#[test]
fn every_block_passes_in_single_precision() {
    run_suite::<f32>();
}

#[test]
fn every_block_passes_in_double_precision() {
    run_suite::<f64>();
}

#[test]
fn suite_covers_required_blocks() {
    let names: Vec<_> = standard_suite::<f64>(0).iter().map(|c| c.name).collect();
    for required in [
        "residual_block",
        "lfem",
        "patch_embed",
        "msa",
        "swin_block",
        "gfem",
        "psab",
        "safm",
        "cafm",
        "fuse_hybrid",
        "network_forward",
        "charbonnier",
        "weighted_loss",
    ] {
        assert!(names.contains(&required), "missing {required}");
    }
}
