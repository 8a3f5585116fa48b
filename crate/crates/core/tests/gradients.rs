//! Central-difference gradient checks in double precision.

mod common;

use common::checks;

#[test]
fn film_generator_gradients() {
    let worst = checks::film();
    assert!(worst.rel < 1e-4, "{worst:?}");
}

#[test]
fn prompt_block_gradients() {
    let worst = checks::prompt_block();
    assert!(worst.rel < 1e-4, "{worst:?}");
}

#[test]
fn ssim_and_reconstruction_loss_gradients() {
    let (ssim, rec) = checks::ssim_losses();
    assert!(ssim.rel < 1e-4, "SSIM {ssim:?}");
    assert!(rec.rel < 1e-4, "reconstruction loss {rec:?}");
}

#[test]
fn whole_model_gradients_on_a_tiny_config() {
    let worst = checks::whole_model();
    assert!(worst.rel < 1e-3, "{worst:?}");
}
