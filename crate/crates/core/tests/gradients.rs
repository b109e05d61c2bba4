//! End-to-end ELBO gradients against central finite differences.

mod common;

use pegp_vae::datagen::DatasetConfig;
use pegp_vae::vae::Model;

fn priors() -> Vec<pegp_vae::kernels::LatentPrior> {
    vec![common::physics_prior(&DatasetConfig::default()), common::se_prior()]
}

#[test]
fn network_gradients_match_finite_differences() {
    let data = common::small_dataset(1, 31);
    let seq = &data[0].0;
    for (k, prior) in priors().into_iter().enumerate() {
        let model = Model::seeded(prior, 1600, 16, 100 + k as u64);
        let r = common::gradient_sweep(seq, &model, &common::NETWORK_BLOCKS, 60, 5 + k as u64, &common::FD_STEPS, 1e-6);
        assert_eq!(r.checked, 60);
        assert!(r.worst_relative <= 1e-4, "worst relative error {}", r.worst_relative);
    }
}

// The 30-frame Gram is too ill-conditioned for a finite-difference oracle in
// the kernel hyperparameters to resolve 1e-4, so these use a shorter window.
#[test]
fn hyperparameter_gradients_match_finite_differences() {
    let data = common::small_dataset(1, 31);
    let seq = data[0].0.truncated(8);
    for (k, prior) in priors().into_iter().enumerate() {
        let model = Model::seeded(prior, 1600, 16, 100 + k as u64);
        let r = common::gradient_sweep(&seq, &model, &common::HYPER_BLOCK, 12, 9 + k as u64, &common::FD_STEPS, 1e-6);
        assert!(r.worst_relative <= 1e-4, "worst relative error {}", r.worst_relative);
    }
}
